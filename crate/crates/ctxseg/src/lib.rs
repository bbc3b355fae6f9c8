//! Context-aware patch segmentation.
//!
//! Full-resolution images are tiled into non-overlapping square patches.
//! Each patch is segmented together with its eight neighbors: the encoded
//! neighbors are fused into the target encoding through spatial attention
//! gated by a learnable per-position field, then decoded to per-pixel class
//! labels. The crate ships its own reverse-mode autodiff tensor core, a
//! configurable encoder-decoder, training and evaluation tooling, and a
//! deterministic synthetic task whose patch-border pixels are unlabelable
//! without neighbor context.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod patch;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{backward, Tensor};
