//! Neighbor-context fusion through spatial attention.
//!
//! The encoded target patch `I_e` (1 x C x HW after flattening) is compared
//! against the eight encoded neighbors plus its own encoding, concatenated
//! into nine slabs (9 x C x HW). Attention weights come from the dot
//! products of target positions with slab positions, softmax-normalized
//! over the source axis; each slab is recombined by those weights, the
//! slabs are summed, scaled elementwise by the learnable per-position
//! alpha field, and added back onto `I_e`.
//!
//! The neighbor slabs are encoded with the encoder parameters frozen, so
//! only the target branch (and the concatenated copy of `I_e`) trains the
//! encoder. With alpha at its zero initialization the fused encoding is
//! bitwise identical to the target encoding.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::param::{FreezeGuard, Parameter};
use crate::patch::NeighborSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable per-position gate, zero-initialized, broadcast over channels.
pub struct AlphaGate<T: Scalar> {
    pub param: Rc<Parameter<T>>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> AlphaGate<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Ok(AlphaGate {
            param: Parameter::new("fusion.alpha", vec![T::zero(); height * width], &[
                height, width,
            ])?,
            height,
            width,
        })
    }
}

/// Intermediate tensors of one fusion pass.
pub struct FusionState<T: Scalar> {
    /// Encoded target patch, `[1, C, H, W]`.
    pub i_e: Tensor<T>,
    /// Eight frozen neighbor encodings with the live target encoding
    /// appended as slab 8, `[9, C, HW]`.
    pub n_e_cat: Tensor<T>,
    /// Attention weights, `[9, HW, HW]`; every row sums to 1.
    pub w_c: Tensor<T>,
    /// Weighted neighbors, `[9, C, H, W]`.
    pub n_w: Tensor<T>,
    /// Fused encoding handed to the decoder, `[1, C, H, W]`.
    pub d_e: Tensor<T>,
}

/// Options resolving the two behaviors the paper leaves open.
#[derive(Clone, Copy, Debug)]
pub struct FusionOpts<T: Scalar> {
    /// Divisor applied to attention logits; 1.0 means raw dot products.
    pub temperature: T,
    /// Detach the concatenated target slab instead of keeping it live.
    pub detach_target_slab: bool,
}

impl<T: Scalar> Default for FusionOpts<T> {
    fn default() -> Self {
        FusionOpts {
            temperature: T::one(),
            detach_target_slab: false,
        }
    }
}

/// Convert one CHW-major patch tile into a `[1, C, S, S]` input tensor.
pub fn tile_tensor<T: Scalar>(tile: &[f64], channels: usize, patch_size: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = tile.iter().map(|&v| T::from_f64(v)).collect();
    Tensor::new(data, &[1, channels, patch_size, patch_size])
}

/// Encode the target patch; fully differentiable w.r.t. encoder parameters.
pub fn encode_target<T: Scalar>(encoder: &Encoder<T>, patch: &Tensor<T>) -> Result<Tensor<T>> {
    encoder.forward(patch)
}

/// Encode the eight neighbor tiles batched in canonical order with the
/// encoder parameters frozen: values match an unfrozen pass exactly, and
/// the branch contributes zero gradient to the encoder.
pub fn encode_neighbors<T: Scalar>(
    encoder: &Encoder<T>,
    neighbors: &NeighborSet<f64>,
    channels: usize,
    patch_size: usize,
) -> Result<Tensor<T>> {
    let s = patch_size;
    let mut data = Vec::with_capacity(8 * channels * s * s);
    for tile in &neighbors.tiles {
        if tile.len() != channels * s * s {
            return Err(Error::dim(format!(
                "neighbor tile has {} values, expected {}",
                tile.len(),
                channels * s * s
            )));
        }
        data.extend(tile.iter().map(|&v| T::from_f64(v)));
    }
    let batch = Tensor::new(data, &[8, channels, s, s])?;
    let _frozen = FreezeGuard::freeze(&encoder.params());
    encoder.forward(&batch)
}

/// Attention weights `W_c[k, j, i] = softmax_i(sum_c I_e[0,c,j] * N[k,c,i])`.
pub fn attention_weights<T: Scalar>(
    i_e_flat: &Tensor<T>,
    n_e_cat: &Tensor<T>,
    temperature: T,
) -> Result<Tensor<T>> {
    if i_e_flat.shape().len() != 3 || i_e_flat.shape()[0] != 1 {
        return Err(Error::dim(format!(
            "attention_weights expects [1,C,HW] target, got {:?}",
            i_e_flat.shape()
        )));
    }
    let query = i_e_flat.transpose12()?; // [1, HW, C]
    let mut logits = query.matmul_batched(n_e_cat)?; // [9, HW, HW]
    if temperature != T::one() {
        logits = logits.scale(T::one() / temperature)?;
    }
    logits.softmax_last()
}

/// Weighted neighbors `N_w[k, c, j] = sum_i N[k,c,i] * W_c[k,j,i]`,
/// reshaped to `[9, C, H, W]`.
pub fn weighted_neighbors<T: Scalar>(
    n_e_cat: &Tensor<T>,
    w_c: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let flat = n_e_cat.matmul_batched(&w_c.transpose12()?)?; // [9, C, HW]
    let (k, c) = (flat.shape()[0], flat.shape()[1]);
    flat.reshape(&[k, c, height, width])
}

/// `D_e = I_e + alpha (.) sum_k N_w[k]`, alpha broadcast over channels.
pub fn fuse<T: Scalar>(
    i_e: &Tensor<T>,
    n_w: &Tensor<T>,
    gate: &AlphaGate<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (i_e.shape()[2], i_e.shape()[3]);
    if gate.height != h || gate.width != w {
        return Err(Error::config(format!(
            "alpha field is {}x{}, encoder output is {h}x{w}",
            gate.height, gate.width
        )));
    }
    let context = n_w.sum_axis0()?; // [1, C, H, W]
    let gated = context.mul_spatial(&gate.param.value())?;
    i_e.add(&gated)
}

/// Run the attention tail from precomputed encodings.
pub fn fuse_from_encodings<T: Scalar>(
    i_e: &Tensor<T>,
    n_e: &Tensor<T>,
    gate: &AlphaGate<T>,
    opts: FusionOpts<T>,
) -> Result<FusionState<T>> {
    let (c, h, w) = (i_e.shape()[1], i_e.shape()[2], i_e.shape()[3]);
    let hw = h * w;
    let i_e_flat = i_e.reshape(&[1, c, hw])?;
    let n_e_flat = n_e.reshape(&[8, c, hw])?;
    let target_slab = if opts.detach_target_slab {
        i_e_flat.detach()
    } else {
        i_e_flat.clone()
    };
    let n_e_cat = Tensor::concat0(&[&n_e_flat, &target_slab])?;
    let w_c = attention_weights(&i_e_flat, &n_e_cat, opts.temperature)?;
    let n_w = weighted_neighbors(&n_e_cat, &w_c, h, w)?;
    let d_e = fuse(i_e, &n_w, gate)?;
    Ok(FusionState {
        i_e: i_e.clone(),
        n_e_cat,
        w_c,
        n_w,
        d_e,
    })
}

/// Full fusion pass over raw tiles: encode the target (live), encode the
/// neighbors (frozen), then fuse.
pub fn fuse_pass<T: Scalar>(
    encoder: &Encoder<T>,
    gate: &AlphaGate<T>,
    patch: &Tensor<T>,
    neighbors: &NeighborSet<f64>,
    opts: FusionOpts<T>,
) -> Result<FusionState<T>> {
    let (channels, s) = (patch.shape()[1], patch.shape()[2]);
    let i_e = encode_target(encoder, patch)?;
    let n_e = encode_neighbors(encoder, neighbors, channels, s)?;
    fuse_from_encodings(&i_e, &n_e, gate, opts)
}

/// Cache of frozen per-tile encodings, keyed by (image id, row, col).
/// Valid only while the encoder parameters are unchanged; callers clear it
/// after every optimizer step. Cached passes are bitwise identical to
/// uncached ones because batch items are encoded independently.
pub struct EncodeCache<T: Scalar> {
    tiles: HashMap<(usize, usize, usize), Tensor<T>>,
    zero_tile: Option<Tensor<T>>,
    pub hits: u64,
    pub misses: u64,
}

impl<T: Scalar> EncodeCache<T> {
    pub fn new() -> Self {
        EncodeCache {
            tiles: HashMap::new(),
            zero_tile: None,
            hits: 0,
            misses: 0,
        }
    }

    pub fn clear(&mut self) {
        self.tiles.clear();
        self.zero_tile = None;
    }

    fn encode_frozen(
        encoder: &Encoder<T>,
        tile: &[f64],
        channels: usize,
        s: usize,
    ) -> Result<Tensor<T>> {
        let input = tile_tensor::<T>(tile, channels, s)?;
        let _frozen = FreezeGuard::freeze(&encoder.params());
        Ok(encoder.forward(&input)?.detach())
    }

    fn get_or_encode(
        &mut self,
        encoder: &Encoder<T>,
        key: Option<(usize, usize, usize)>,
        tile: &[f64],
        channels: usize,
        s: usize,
    ) -> Result<Tensor<T>> {
        match key {
            Some(key) => {
                if let Some(t) = self.tiles.get(&key) {
                    self.hits += 1;
                    return Ok(t.clone());
                }
                self.misses += 1;
                let t = Self::encode_frozen(encoder, tile, channels, s)?;
                self.tiles.insert(key, t.clone());
                Ok(t)
            }
            None => {
                if let Some(t) = &self.zero_tile {
                    self.hits += 1;
                    return Ok(t.clone());
                }
                self.misses += 1;
                let t = Self::encode_frozen(encoder, tile, channels, s)?;
                self.zero_tile = Some(t.clone());
                Ok(t)
            }
        }
    }
}

impl<T: Scalar> Default for EncodeCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `encode_neighbors` through the cache. `target` is (image id, row, col);
/// slot keys are derived from the canonical offsets, synthetic slots share
/// one zero-tile entry.
pub fn encode_neighbors_cached<T: Scalar>(
    encoder: &Encoder<T>,
    neighbors: &NeighborSet<f64>,
    target: (usize, usize, usize),
    cache: &mut EncodeCache<T>,
    channels: usize,
    patch_size: usize,
) -> Result<Tensor<T>> {
    let (image_id, row, col) = target;
    let mut slabs = Vec::with_capacity(8);
    for (slot, (dr, dc)) in crate::patch::NEIGHBOR_OFFSETS.iter().enumerate() {
        let key = if neighbors.synthetic[slot] {
            None
        } else {
            Some((
                image_id,
                (row as isize + dr) as usize,
                (col as isize + dc) as usize,
            ))
        };
        slabs.push(cache.get_or_encode(encoder, key, &neighbors.tiles[slot], channels, patch_size)?);
    }
    let refs: Vec<&Tensor<T>> = slabs.iter().collect();
    Tensor::concat0(&refs)
}
