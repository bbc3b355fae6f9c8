//! Deterministic synthetic segmentation task whose patch-border bands are
//! unlabelable without neighbor context.
//!
//! Every patch of the grid carries a uniformly random color class rendered
//! as a distinct gray intensity. Pixels within `context_radius` of a patch
//! edge that faces a real neighbor form a band: their appearance is a
//! fixed marker intensity carrying no class information, while their true
//! label is the majority color over the patch's real neighbors, ties
//! breaking toward the lowest class id. By construction the band label is
//! independent of everything inside the target patch, so no per-patch
//! classifier can beat chance there, while a neighbor-aware classifier can
//! recover the labels exactly up to noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::patch::{Image, LabelMap, NEIGHBOR_OFFSETS};

/// Appearance of band pixels; distinct from every class intensity.
pub const BAND_INTENSITY: f64 = 1.0;

/// Rendered gray level of class `m` out of `k`.
pub fn class_intensity(m: usize, k: usize) -> f64 {
    (m as f64 + 1.0) / (k as f64 + 1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    /// Square image side; must be a multiple of `patch_size`.
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// Band width in pixels; 0 disables the neighbor dependency.
    pub context_radius: usize,
    /// Gaussian noise sigma on normalized intensities.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            image_size: 256,
            patch_size: 32,
            num_classes: 3,
            context_radius: 4,
            noise_level: 0.02,
            seed: 1,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be >= 1".to_string()));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(2..=254).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in [2,254], got {}",
                self.num_classes
            )));
        }
        if self.context_radius >= self.patch_size {
            return Err(Error::config(format!(
                "context_radius {} must be smaller than patch_size {}",
                self.context_radius, self.patch_size
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::config("noise_level must be >= 0".to_string()));
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Majority color over a patch's real neighbors; ties break toward the
/// lowest class id, so the label is a deterministic function of the
/// neighbor color counts alone.
fn neighbor_majority(colors: &[usize], grid: usize, r: usize, c: usize, k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for (dr, dc) in NEIGHBOR_OFFSETS {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= grid as isize || nc >= grid as isize {
            continue;
        }
        counts[colors[nr as usize * grid + nc as usize]] += 1;
    }
    let best = *counts.iter().max().unwrap();
    (0..k).find(|&m| counts[m] == best).unwrap()
}

/// True iff the in-patch pixel `(py, px)` lies within `radius` of a patch
/// edge that faces a real neighbor.
fn in_band(
    py: usize,
    px: usize,
    s: usize,
    radius: usize,
    r: usize,
    c: usize,
    grid: usize,
) -> bool {
    if radius == 0 {
        return false;
    }
    (r > 0 && py < radius)
        || (r + 1 < grid && s - 1 - py < radius)
        || (c > 0 && px < radius)
        || (c + 1 < grid && s - 1 - px < radius)
}

/// Generate one (image, label) pair, fully determined by the config seed.
pub fn generate(cfg: &SyntheticTaskConfig) -> Result<(Image, LabelMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = cfg.grid();
    let (s, k, size) = (cfg.patch_size, cfg.num_classes, cfg.image_size);

    let colors: Vec<usize> = (0..grid * grid).map(|_| rng.random_range(0..k)).collect();

    let mut labels = vec![0u8; size * size];
    let mut pixels = vec![0f64; size * size];
    for y in 0..size {
        let (r, py) = (y / s, y % s);
        for x in 0..size {
            let (c, px) = (x / s, x % s);
            let (label, intensity) = if in_band(py, px, s, cfg.context_radius, r, c, grid) {
                (
                    neighbor_majority(&colors, grid, r, c, k),
                    BAND_INTENSITY,
                )
            } else {
                let v = colors[r * grid + c];
                (v, class_intensity(v, k))
            };
            labels[y * size + x] = label as u8;
            let noise: f64 = rng.sample(StandardNormal);
            pixels[y * size + x] = (intensity + cfg.noise_level * noise).clamp(0.0, 1.0);
        }
    }
    Ok((
        Image::new(1, size, size, pixels)?,
        LabelMap::new(size, size, labels)?,
    ))
}

/// Pixels whose label depends on neighbor content. Pure geometry, shared
/// by the generator and the band-accuracy evaluation.
pub fn band_mask(cfg: &SyntheticTaskConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let grid = cfg.grid();
    let (s, size) = (cfg.patch_size, cfg.image_size);
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = in_band(y % s, x % s, s, cfg.context_radius, y / s, x / s, grid);
        }
    }
    Ok(mask)
}

/// Accuracy restricted to masked pixels.
pub fn masked_accuracy(pred: &LabelMap, truth: &LabelMap, mask: &[bool]) -> Result<f64> {
    if pred.data.len() != truth.data.len() || pred.data.len() != mask.len() {
        return Err(Error::usage("masked_accuracy: size mismatch".to_string()));
    }
    let mut hit = 0u64;
    let mut total = 0u64;
    for ((&p, &t), &m) in pred.data.iter().zip(&truth.data).zip(mask) {
        if m {
            total += 1;
            hit += (p == t) as u64;
        }
    }
    if total == 0 {
        return Err(Error::usage("masked_accuracy: empty mask".to_string()));
    }
    Ok(hit as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// rule oracles

/// What a pixel's appearance quantizes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Quantized {
    Class(usize),
    Band,
}

fn quantize(intensity: f64, k: usize) -> Quantized {
    let mut best = Quantized::Band;
    let mut best_dist = (intensity - BAND_INTENSITY).abs();
    for m in 0..k {
        let d = (intensity - class_intensity(m, k)).abs();
        if d < best_dist {
            best_dist = d;
            best = Quantized::Class(m);
        }
    }
    best
}

/// Most frequent class among the class-quantized pixels of patch `(r, c)`.
fn dominant_color(image: &Image, cfg: &SyntheticTaskConfig, r: usize, c: usize) -> usize {
    let (s, size, k) = (cfg.patch_size, cfg.image_size, cfg.num_classes);
    let mut counts = vec![0usize; k];
    for py in 0..s {
        for px in 0..s {
            let v = image.data[(r * s + py) * size + (c * s + px)];
            if let Quantized::Class(m) = quantize(v, k) {
                counts[m] += 1;
            }
        }
    }
    (0..k).max_by_key(|&m| (counts[m], std::cmp::Reverse(m))).unwrap_or(0)
}

/// Rule classifier that sees one patch at a time: class-looking pixels get
/// their quantized class, band-looking pixels fall back to the patch's own
/// dominant color (the best any per-patch rule can do is chance there).
pub fn per_patch_oracle(image: &Image, cfg: &SyntheticTaskConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (s, size, k) = (cfg.patch_size, cfg.image_size, cfg.num_classes);
    let grid = cfg.grid();
    let mut out = vec![0u8; size * size];
    for r in 0..grid {
        for c in 0..grid {
            let own = dominant_color(image, cfg, r, c);
            for py in 0..s {
                for px in 0..s {
                    let idx = (r * s + py) * size + (c * s + px);
                    out[idx] = match quantize(image.data[idx], k) {
                        Quantized::Class(m) => m as u8,
                        Quantized::Band => own as u8,
                    };
                }
            }
        }
    }
    LabelMap::new(size, size, out)
}

/// Rule classifier that also reads the adjacent patches: band-looking
/// pixels get the majority over the real neighbors' dominant colors, with
/// the generator's tie-break.
pub fn neighbor_aware_oracle(image: &Image, cfg: &SyntheticTaskConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (s, size, k) = (cfg.patch_size, cfg.image_size, cfg.num_classes);
    let grid = cfg.grid();
    let dominant: Vec<usize> = (0..grid * grid)
        .map(|i| dominant_color(image, cfg, i / grid, i % grid))
        .collect();
    let mut out = vec![0u8; size * size];
    for r in 0..grid {
        for c in 0..grid {
            let band_label = neighbor_majority(&dominant, grid, r, c, k);
            for py in 0..s {
                for px in 0..s {
                    let idx = (r * s + py) * size + (c * s + px);
                    out[idx] = match quantize(image.data[idx], k) {
                        Quantized::Class(m) => m as u8,
                        Quantized::Band => band_label as u8,
                    };
                }
            }
        }
    }
    LabelMap::new(size, size, out)
}

// ---------------------------------------------------------------------------
// dataset writing and splitting

/// Per-image seeds spread out so consecutive images are decorrelated.
pub fn image_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Write `num_images` (image, label) pairs in the `images/` + `labels/`
/// layout, plus the config alongside for provenance. Returns the stems.
pub fn generate_dataset(
    cfg: &SyntheticTaskConfig,
    num_images: usize,
    dir: &Path,
) -> Result<Vec<String>> {
    cfg.validate()?;
    if num_images == 0 {
        return Err(Error::config("num_images must be >= 1".to_string()));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut stems = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let mut image_cfg = cfg.clone();
        image_cfg.seed = image_seed(cfg.seed, i);
        let (image, labels) = generate(&image_cfg)?;
        let stem = format!("img_{i:04}");
        imageio::write_image(&image, &dir.join("images").join(format!("{stem}.png")))?;
        imageio::write_labels(&labels, &dir.join("labels").join(format!("{stem}.png")))?;
        stems.push(stem);
    }
    let provenance = toml::to_string(cfg)
        .map_err(|e| Error::config(format!("cannot serialize task config: {e}")))?;
    std::fs::write(
        dir.join("task.toml"),
        format!("{provenance}num_images = {num_images}\n"),
    )?;
    Ok(stems)
}

/// Deterministic disjoint cover of `n` items by the given fractions.
/// Boundaries are cumulative-rounded so e.g. (0.8, 0.2) of 10 gives 8/2.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(Error::config("split needs at least one fraction".to_string()));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::config(format!("fractions out of [0,1]: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "fractions must sum to 1, got {total}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates with draws from the seeded stream.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut parts = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        let end = end.clamp(start, n);
        parts.push(order[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

/// Stems of a dataset split into (train, val, test) path lists.
pub fn split_stems(
    stems: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let parts = split(stems.len(), &[fractions.0, fractions.1, fractions.2], seed)?;
    let pick = |idx: &[usize]| {
        let mut v: Vec<String> = idx.iter().map(|&i| stems[i].clone()).collect();
        v.sort();
        v
    };
    Ok((pick(&parts[0]), pick(&parts[1]), pick(&parts[2])))
}

/// Paths of the images/labels pair for a stem under a dataset directory.
pub fn pair_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{stem}.png")),
        dir.join("labels").join(format!("{stem}.png")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;

    fn small_cfg(radius: usize, seed: u64) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            image_size: 96,
            patch_size: 16,
            num_classes: 3,
            context_radius: radius,
            noise_level: 0.02,
            seed,
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = small_cfg(4, 9);
        let (img_a, lab_a) = generate(&cfg).unwrap();
        let (img_b, lab_b) = generate(&cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&img_a.data), bits(&img_b.data));
        assert_eq!(lab_a, lab_b);
        let (img_c, _) = generate(&small_cfg(4, 10)).unwrap();
        assert_ne!(bits(&img_a.data), bits(&img_c.data));
    }

    #[test]
    fn zero_radius_task_is_solved_by_the_per_patch_oracle() {
        let cfg = small_cfg(0, 11);
        let (image, truth) = generate(&cfg).unwrap();
        let pred = per_patch_oracle(&image, &cfg).unwrap();
        let mut cm = ConfusionMatrix::new(3, None, None).unwrap();
        cm.accumulate(&pred, &truth).unwrap();
        // Noise floor is ~6 sigma away from any decision boundary.
        assert!(cm.miou().unwrap() > 0.999, "miou {}", cm.miou().unwrap());
    }

    #[test]
    fn banded_task_separates_the_two_oracles() {
        // Per-patch rule at chance on bands, neighbor-aware rule near 1.
        let cfg_base = small_cfg(4, 12);
        let mask = band_mask(&cfg_base).unwrap();
        let mut per_patch_acc = Vec::new();
        let mut aware_acc = Vec::new();
        for i in 0..16 {
            let mut cfg = cfg_base.clone();
            cfg.seed = image_seed(cfg_base.seed, i);
            let (image, truth) = generate(&cfg).unwrap();
            let blind = per_patch_oracle(&image, &cfg).unwrap();
            let aware = neighbor_aware_oracle(&image, &cfg).unwrap();
            per_patch_acc.push(masked_accuracy(&blind, &truth, &mask).unwrap());
            aware_acc.push(masked_accuracy(&aware, &truth, &mask).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let blind_mean = mean(&per_patch_acc);
        let aware_mean = mean(&aware_acc);
        assert!(
            (blind_mean - 1.0 / 3.0).abs() < 0.05,
            "per-patch band accuracy {blind_mean} strays from chance"
        );
        assert!(aware_mean > 0.999, "neighbor-aware band accuracy {aware_mean}");
    }

    #[test]
    fn non_band_pixels_are_labeled_by_patch_color_everywhere() {
        let cfg = small_cfg(4, 13);
        let (image, truth) = generate(&cfg).unwrap();
        let mask = band_mask(&cfg).unwrap();
        let pred = per_patch_oracle(&image, &cfg).unwrap();
        let mut wrong = 0;
        for i in 0..mask.len() {
            if !mask[i] && pred.data[i] != truth.data[i] {
                wrong += 1;
            }
        }
        assert_eq!(wrong, 0);
    }

    #[test]
    fn band_mask_matches_the_marker_intensity_at_zero_noise() {
        let mut cfg = small_cfg(4, 14);
        cfg.noise_level = 0.0;
        let (image, _) = generate(&cfg).unwrap();
        let mask = band_mask(&cfg).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            assert_eq!(image.data[i] == BAND_INTENSITY, m, "pixel {i}");
        }
    }

    #[test]
    fn band_fraction_is_substantial_for_the_reference_geometry() {
        let cfg = SyntheticTaskConfig::default();
        let mask = band_mask(&cfg).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!(frac > 0.3 && frac < 0.5, "band fraction {frac}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg(4, 1);
        cfg.context_radius = 16;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg(4, 1);
        cfg.image_size = 100; // not a multiple of 16
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_puts_everything_in_train_for_degenerate_fractions() {
        let parts = split(10, &[1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(parts[0].len(), 10);
        assert!(parts[1].is_empty() && parts[2].is_empty());
    }

    #[test]
    fn split_80_20_of_ten_is_8_2() {
        let parts = split(10, &[0.8, 0.2], 3).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (8, 2));
    }

    #[test]
    fn split_is_a_disjoint_cover() {
        for seed in 0..5 {
            let parts = split(23, &[0.6, 0.25, 0.15], seed).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(split(5, &[0.5, 0.2], 1), Err(Error::Config(_))));
        assert!(matches!(split(5, &[1.5, -0.5], 1), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_directory_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(4, 15);
        let stems = generate_dataset(&cfg, 3, dir.path()).unwrap();
        assert_eq!(stems.len(), 3);
        for stem in &stems {
            let (img_path, lab_path) = pair_paths(dir.path(), stem);
            let image = crate::imageio::read_image(&img_path).unwrap();
            let labels = crate::imageio::read_labels(&lab_path).unwrap();
            assert_eq!((image.height, image.width), (96, 96));
            assert_eq!((labels.height, labels.width), (96, 96));
            assert!(labels.data.iter().all(|&v| v < 3));
        }
        assert!(dir.path().join("task.toml").exists());
    }
}
