//! Patch-level dataset over paired image/label directories.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio;
use crate::patch::{neighbor_patches, tile_image, tile_labels, Image, LabelMap, NeighborSet, PatchGrid};

/// Tiled (image, label) pairs with a flat index over all target patches.
pub struct Dataset {
    grids: Vec<(PatchGrid<f64>, PatchGrid<u8>)>,
    /// (image id, row, col) per sample.
    index: Vec<(usize, usize, usize)>,
    pub stems: Vec<String>,
}

/// One training sample: the target tile, its neighborhood, and the
/// ground-truth tile for the same grid cell.
pub struct Sample<'a> {
    pub image_id: usize,
    pub row: usize,
    pub col: usize,
    pub patch: &'a [f64],
    pub labels: &'a [u8],
}

impl Dataset {
    /// Tile in-memory pairs (labels padded with `ignore_label`).
    pub fn from_pairs(
        pairs: Vec<(Image, LabelMap)>,
        patch_size: usize,
        ignore_label: u8,
    ) -> Result<Self> {
        let mut grids = Vec::with_capacity(pairs.len());
        let mut index = Vec::new();
        for (i, (image, labels)) in pairs.into_iter().enumerate() {
            if image.height != labels.height || image.width != labels.width {
                return Err(Error::data(format!(
                    "pair {i}: image {}x{} vs labels {}x{}",
                    image.height, image.width, labels.height, labels.width
                )));
            }
            let igrid = tile_image(&image, patch_size)?;
            let lgrid = tile_labels(&labels, patch_size, ignore_label)?;
            for r in 0..igrid.rows() {
                for c in 0..igrid.cols() {
                    index.push((i, r, c));
                }
            }
            grids.push((igrid, lgrid));
        }
        if index.is_empty() {
            return Err(Error::usage("dataset holds no patches".to_string()));
        }
        Ok(Dataset {
            grids,
            index,
            stems: Vec::new(),
        })
    }

    /// Load `stems` from the `images/` + `labels/` directory layout.
    pub fn load(dir: &Path, stems: &[String], patch_size: usize, ignore_label: u8) -> Result<Self> {
        if stems.is_empty() {
            return Err(Error::usage(format!(
                "no dataset entries under {}",
                dir.display()
            )));
        }
        let mut pairs = Vec::with_capacity(stems.len());
        for stem in stems {
            let (img_path, lab_path) = crate::synthetic::pair_paths(dir, stem);
            pairs.push((imageio::read_image(&img_path)?, imageio::read_labels(&lab_path)?));
        }
        let mut ds = Self::from_pairs(pairs, patch_size, ignore_label)?;
        ds.stems = stems.to_vec();
        Ok(ds)
    }

    /// Stems present in a dataset directory (sorted by file name).
    pub fn list_stems(dir: &Path) -> Result<Vec<String>> {
        let images = dir.join("images");
        let mut stems = Vec::new();
        for entry in std::fs::read_dir(&images)? {
            let path = entry?.path();
            if let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) {
                let ext = ext.to_string_lossy().to_lowercase();
                if matches!(ext.as_str(), "png" | "pgm" | "ppm") {
                    stems.push(stem.to_string_lossy().to_string());
                }
            }
        }
        stems.sort();
        if stems.is_empty() {
            return Err(Error::data(format!("no images under {}", images.display())));
        }
        Ok(stems)
    }

    pub fn num_images(&self) -> usize {
        self.grids.len()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.grids[0].0.channels()
    }

    pub fn sample(&self, i: usize) -> Result<Sample<'_>> {
        let (image_id, row, col) = *self
            .index
            .get(i)
            .ok_or_else(|| Error::usage(format!("sample {i} out of range")))?;
        let (igrid, lgrid) = &self.grids[image_id];
        Ok(Sample {
            image_id,
            row,
            col,
            patch: igrid.tile(row, col)?,
            labels: lgrid.tile(row, col)?,
        })
    }

    pub fn neighbors(&self, i: usize) -> Result<NeighborSet<f64>> {
        let (image_id, row, col) = self.index[i];
        neighbor_patches(&self.grids[image_id].0, row, col)
    }
}
