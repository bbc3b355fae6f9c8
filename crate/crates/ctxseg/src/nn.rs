//! Convolutional encoder / decoder building blocks.
//!
//! Downsampling stages use 4x4 kernels with stride 2 and padding 1, which
//! halve even spatial sizes with an exactly integral output size;
//! stride-1 stages use size-preserving 3x3 kernels. The decoder mirrors
//! each stride-2 stage with a nearest-neighbor x2 upsample followed by a
//! 3x3 convolution, and ends in a 1x1 class head.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::param::Parameter;
use crate::scalar::Scalar;
use crate::tensor::{conv2d, Tensor};

pub struct ConvLayer<T: Scalar> {
    pub weight: Rc<Parameter<T>>,
    pub bias: Rc<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// He fan-in initialization for the kernel, zero bias.
    pub fn init(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight: Vec<T> = (0..out_channels * fan_in)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Ok(ConvLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                weight,
                &[out_channels, in_channels, kernel, kernel],
            )?,
            bias: Parameter::new(format!("{name}.bias"), vec![T::zero(); out_channels], &[
                out_channels,
            ])?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.value(), &self.bias.value(), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Rc<Parameter<T>>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Downsampling feature extractor: conv + ReLU per stage.
pub struct Encoder<T: Scalar> {
    pub stages: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = x.clone();
        for stage in &self.stages {
            out = stage.forward(&out)?.relu();
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Rc<Parameter<T>>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }
}

/// Upsampling head producing per-pixel class logits.
pub struct Decoder<T: Scalar> {
    pub stages: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = z.clone();
        for stage in &self.stages {
            out = stage.forward(&out.upsample_nearest(2)?)?.relu();
        }
        self.head.forward(&out)
    }

    pub fn params(&self) -> Vec<Rc<Parameter<T>>> {
        let mut ps: Vec<_> = self.stages.iter().flat_map(|s| s.params()).collect();
        ps.extend(self.head.params());
        ps
    }
}
