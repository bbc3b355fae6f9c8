//! Image tiling, eight-neighborhood extraction, and stitching.
//!
//! Images are partitioned into non-overlapping square patches; the grid is
//! zero-padded on the bottom/right edges when the image size is not a
//! multiple of the patch size. Neighbors missing at image borders are
//! replaced by zero-valued tiles flagged as synthetic.

use crate::error::{Error, Result};

/// Multi-channel raster normalized to `[0,1]`, stored channel-major (CHW).
#[derive(Clone, Debug)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::data(format!(
                "image {channels}x{height}x{width} does not match {} samples",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }
}

/// Single-channel raster of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::data(format!(
                "label raster {height}x{width} does not match {} samples",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }
}

/// Canonical neighbor order: row-major around the target.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1), // NW
    (-1, 0),  // N
    (-1, 1),  // NE
    (0, -1),  // W
    (0, 1),   // E
    (1, -1),  // SW
    (1, 0),   // S
    (1, 1),   // SE
];

/// Grid shape and padding bookkeeping, shared by image and label grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub original_height: usize,
    pub original_width: usize,
    pub channels: usize,
}

/// A raster split into `rows x cols` tiles of `patch_size^2 * channels`
/// values each, channel-major within the tile.
#[derive(Clone, Debug)]
pub struct PatchGrid<P: Copy> {
    geometry: GridGeometry,
    tiles: Vec<Vec<P>>,
    pad_value: P,
}

fn tile_planes<P: Copy>(
    data: &[P],
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
    pad_value: P,
) -> PatchGrid<P> {
    let s = patch_size;
    let rows = height.div_ceil(s);
    let cols = width.div_ceil(s);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut tile = vec![pad_value; channels * s * s];
            for ch in 0..channels {
                for y in 0..s {
                    let src_y = r * s + y;
                    if src_y >= height {
                        break;
                    }
                    for x in 0..s {
                        let src_x = c * s + x;
                        if src_x >= width {
                            break;
                        }
                        tile[(ch * s + y) * s + x] = data[(ch * height + src_y) * width + src_x];
                    }
                }
            }
            tiles.push(tile);
        }
    }
    PatchGrid {
        geometry: GridGeometry {
            patch_size: s,
            rows,
            cols,
            pad_bottom: rows * s - height,
            pad_right: cols * s - width,
            original_height: height,
            original_width: width,
            channels,
        },
        tiles,
        pad_value,
    }
}

/// Partition an image into non-overlapping square patches.
pub fn tile_image(image: &Image, patch_size: usize) -> Result<PatchGrid<f64>> {
    if patch_size == 0 {
        return Err(Error::config("patch size must be >= 1".to_string()));
    }
    Ok(tile_planes(
        &image.data,
        image.channels,
        image.height,
        image.width,
        patch_size,
        0.0,
    ))
}

/// Partition a label raster with the same geometry as the image raster,
/// padding with `pad_label` (normally the ignore label).
pub fn tile_labels(labels: &LabelMap, patch_size: usize, pad_label: u8) -> Result<PatchGrid<u8>> {
    if patch_size == 0 {
        return Err(Error::config("patch size must be >= 1".to_string()));
    }
    Ok(tile_planes(
        &labels.data,
        1,
        labels.height,
        labels.width,
        patch_size,
        pad_label,
    ))
}

impl<P: Copy> PatchGrid<P> {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    pub fn patch_size(&self) -> usize {
        self.geometry.patch_size
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    pub fn tile(&self, row: usize, col: usize) -> Result<&[P]> {
        if row >= self.geometry.rows || col >= self.geometry.cols {
            return Err(Error::usage(format!(
                "tile ({row}, {col}) outside {}x{} grid",
                self.geometry.rows, self.geometry.cols
            )));
        }
        Ok(&self.tiles[row * self.geometry.cols + col])
    }

    pub fn tiles(&self) -> &[Vec<P>] {
        &self.tiles
    }
}

/// The eight neighbor tiles of a target patch in canonical order
/// `[NW, N, NE, W, E, SW, S, SE]`; out-of-grid slots are zero tiles.
#[derive(Clone, Debug)]
pub struct NeighborSet<P: Copy> {
    pub tiles: Vec<Vec<P>>,
    pub synthetic: [bool; 8],
}

impl<P: Copy> NeighborSet<P> {
    pub fn synthetic_count(&self) -> usize {
        self.synthetic.iter().filter(|&&s| s).count()
    }
}

/// Extract the eight-neighborhood of `(row, col)`, zero-extrapolating at
/// grid borders.
pub fn neighbor_patches<P: Copy>(
    grid: &PatchGrid<P>,
    row: usize,
    col: usize,
) -> Result<NeighborSet<P>> {
    let geom = &grid.geometry;
    if row >= geom.rows || col >= geom.cols {
        return Err(Error::usage(format!(
            "patch ({row}, {col}) outside {}x{} grid",
            geom.rows, geom.cols
        )));
    }
    let tile_len = geom.channels * geom.patch_size * geom.patch_size;
    let mut tiles = Vec::with_capacity(8);
    let mut synthetic = [false; 8];
    for (slot, (dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let nr = row as isize + dr;
        let nc = col as isize + dc;
        if nr < 0 || nc < 0 || nr >= geom.rows as isize || nc >= geom.cols as isize {
            tiles.push(vec![grid.pad_value; tile_len]);
            synthetic[slot] = true;
        } else {
            tiles.push(grid.tiles[nr as usize * geom.cols + nc as usize].clone());
        }
    }
    Ok(NeighborSet { tiles, synthetic })
}

/// Reassemble tiles into a full raster and crop away the padding. Tiles
/// must be supplied row-major and match the grid geometry.
pub fn stitch<P: Copy + Default>(tiles: &[Vec<P>], geom: &GridGeometry) -> Result<Vec<P>> {
    let s = geom.patch_size;
    let tile_len = geom.channels * s * s;
    if tiles.len() != geom.rows * geom.cols {
        return Err(Error::usage(format!(
            "stitch: {} tiles for a {}x{} grid",
            tiles.len(),
            geom.rows,
            geom.cols
        )));
    }
    for t in tiles {
        if t.len() != tile_len {
            return Err(Error::usage(format!(
                "stitch: tile has {} values, expected {tile_len}",
                t.len()
            )));
        }
    }
    let (h, w) = (geom.original_height, geom.original_width);
    let mut out = vec![P::default(); geom.channels * h * w];
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let tile = &tiles[r * geom.cols + c];
            for ch in 0..geom.channels {
                for y in 0..s {
                    let dst_y = r * s + y;
                    if dst_y >= h {
                        break;
                    }
                    for x in 0..s {
                        let dst_x = c * s + x;
                        if dst_x >= w {
                            break;
                        }
                        out[(ch * h + dst_y) * w + dst_x] = tile[(ch * s + y) * s + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(channels: usize, h: usize, w: usize) -> Image {
        let data = (0..channels * h * w).map(|i| i as f64 / 1000.0).collect();
        Image::new(channels, h, w, data).unwrap()
    }

    #[test]
    fn divisible_image_tiles_without_padding() {
        let grid = tile_image(&ramp_image(1, 4, 4), 2).unwrap();
        let g = grid.geometry();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!((g.pad_bottom, g.pad_right), (0, 0));
    }

    #[test]
    fn non_divisible_image_gets_bottom_right_padding() {
        let grid = tile_image(&ramp_image(1, 5, 5), 2).unwrap();
        let g = grid.geometry();
        assert_eq!((g.rows, g.cols), (3, 3));
        assert_eq!((g.pad_bottom, g.pad_right), (1, 1));
        // Bottom-right tile is three quarters padding.
        let corner = grid.tile(2, 2).unwrap();
        assert_eq!(corner[1], 0.0);
        assert_eq!(corner[2], 0.0);
        assert_eq!(corner[3], 0.0);
    }

    #[test]
    fn full_resolution_grid_dimensions() {
        let grid = tile_image(&ramp_image(1, 1024, 1024), 256).unwrap();
        assert_eq!((grid.rows(), grid.cols()), (4, 4));
        assert_eq!(grid.tiles().len(), 16);
        assert_eq!(grid.geometry().pad_bottom, 0);
    }

    #[test]
    fn corner_edge_interior_synthetic_counts() {
        let grid = tile_image(&ramp_image(1, 6, 6), 2).unwrap(); // 3x3 grid
        assert_eq!(neighbor_patches(&grid, 0, 0).unwrap().synthetic_count(), 5);
        assert_eq!(neighbor_patches(&grid, 0, 1).unwrap().synthetic_count(), 3);
        assert_eq!(neighbor_patches(&grid, 1, 1).unwrap().synthetic_count(), 0);
        // Corner (0,0): NW, N, NE, W, SW are the synthetic slots.
        let n = neighbor_patches(&grid, 0, 0).unwrap();
        assert_eq!(n.synthetic, [true, true, true, true, false, true, false, false]);
    }

    #[test]
    fn synthetic_slots_are_all_zero_and_real_slots_match_grid() {
        let grid = tile_image(&ramp_image(2, 6, 6), 2).unwrap();
        let n = neighbor_patches(&grid, 0, 1).unwrap();
        for (slot, tile) in n.tiles.iter().enumerate() {
            if n.synthetic[slot] {
                assert!(tile.iter().all(|&v| v == 0.0));
            }
        }
        // Interior target: every slot equals the corresponding grid tile.
        let n = neighbor_patches(&grid, 1, 1).unwrap();
        for (slot, (dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
            let r = (1 + dr) as usize;
            let c = (1 + dc) as usize;
            assert_eq!(n.tiles[slot], grid.tile(r, c).unwrap());
        }
    }

    #[test]
    fn out_of_range_patch_is_a_usage_error() {
        let grid = tile_image(&ramp_image(1, 4, 4), 2).unwrap();
        assert!(matches!(
            neighbor_patches(&grid, 2, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn stitch_inverts_tiling_for_divisible_and_padded_sizes() {
        for (h, w, s) in [(4, 4, 2), (5, 5, 2), (7, 10, 3)] {
            let img = ramp_image(1, h, w);
            let grid = tile_image(&img, s).unwrap();
            let out = stitch(grid.tiles(), grid.geometry()).unwrap();
            assert_eq!(out, img.data, "{h}x{w} S={s}");
        }
    }

    #[test]
    fn every_output_pixel_maps_to_exactly_one_patch_pixel() {
        // Tile a raster of unique values; the stitched output must contain
        // each original value exactly once, in place.
        let (h, w, s) = (5, 7, 3);
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| i as u8).collect()).unwrap();
        let grid = tile_labels(&labels, s, 255).unwrap();
        let out = stitch(grid.tiles(), grid.geometry()).unwrap();
        assert_eq!(out.len(), h * w);
        for (i, &v) in out.iter().enumerate() {
            assert_eq!(v as usize, i);
        }
    }

    #[test]
    fn label_tiling_uses_image_geometry_and_ignore_padding() {
        let labels = LabelMap::new(5, 5, vec![1; 25]).unwrap();
        let lgrid = tile_labels(&labels, 2, 255).unwrap();
        let igrid = tile_image(&ramp_image(3, 5, 5), 2).unwrap();
        let li = lgrid.geometry();
        let ig = igrid.geometry();
        assert_eq!(
            (li.rows, li.cols, li.pad_bottom, li.pad_right),
            (ig.rows, ig.cols, ig.pad_bottom, ig.pad_right)
        );
        let corner = lgrid.tile(2, 2).unwrap();
        assert_eq!(corner, &[1, 255, 255, 255]);
    }

    proptest! {
        #[test]
        fn tile_stitch_identity(
            h in 1usize..40,
            w in 1usize..40,
            s in 1usize..12,
            channels in 1usize..3,
        ) {
            let img = ramp_image(channels, h, w);
            let grid = tile_image(&img, s).unwrap();
            let out = stitch(grid.tiles(), grid.geometry()).unwrap();
            prop_assert_eq!(out, img.data);
        }

        #[test]
        fn synthetic_counts_are_5_3_0(rows in 2usize..6, cols in 2usize..6) {
            let grid = tile_image(&ramp_image(1, rows * 2, cols * 2), 2).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let expected = match (
                        r == 0 || r == rows - 1,
                        c == 0 || c == cols - 1,
                    ) {
                        (true, true) => 5,
                        (true, false) | (false, true) => 3,
                        (false, false) => 0,
                    };
                    let n = neighbor_patches(&grid, r, c).unwrap();
                    prop_assert_eq!(n.synthetic_count(), expected);
                }
            }
        }
    }
}
