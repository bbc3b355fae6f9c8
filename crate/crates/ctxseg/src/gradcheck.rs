//! Finite-difference verification of the full model gradient.
//!
//! The numeric side only ever runs the forward pass: each parameter element
//! is perturbed by a central step and the loss re-evaluated, so the check is
//! independent of the reverse-mode path it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Segmenter;
use crate::patch::NeighborSet;
use crate::scalar::Scalar;
use crate::tensor::{backward, cross_entropy};

/// Move the model to a generic point before differencing: freshly built
/// models have all biases and the alpha gate at exactly 0, which parks
/// ReLU pre-activations on their kink, where central differences and the
/// subgradient legitimately disagree.
pub fn jitter_params<T: Scalar>(model: &Segmenter<T>, seed: u64, scale: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params() {
        let data: Vec<T> = p
            .data()
            .iter()
            .map(|&v| v + T::from_f64(rng.random_range(-scale..scale)))
            .collect();
        p.assign(data)?;
    }
    Ok(())
}

pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.per_param {
            out.push_str(&format!(
                "{:<16} max_rel_err={:.3e} {}\n",
                p.name,
                p.max_rel_err,
                if p.max_rel_err < self.tolerance { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall          max_rel_err={:.3e} tolerance={:.1e} -> {}\n",
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compare analytic gradients of the cross-entropy loss over one (patch,
/// neighbors, labels) sample against central finite differences, for every
/// element of every parameter. Run in 64-bit mode.
///
/// The analytic side runs the live fused forward. The numeric side holds
/// the frozen neighbor encodings fixed at their base-parameter values
/// while encoder parameters are perturbed: the neighbor branch is a
/// constant of the loss by contract, so differencing through it would
/// measure a derivative the model deliberately does not take.
pub fn check_model<T: Scalar>(
    model: &Segmenter<T>,
    patch: &[f64],
    neighbors: Option<&NeighborSet<f64>>,
    labels: &[u8],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use crate::fusion::{encode_neighbors, encode_target, fuse_from_encodings, tile_tensor, FusionOpts};

    let context_on = model.config.context_enabled;
    let (cin, s) = (model.config.in_channels, model.config.patch_size);

    let n_e_const = match (context_on, neighbors) {
        (true, Some(ns)) => {
            let n_e = encode_neighbors(&model.encoder, ns, cin, s)?;
            Some(crate::tensor::Tensor::new(n_e.to_vec(), n_e.shape())?)
        }
        (true, None) => {
            return Err(crate::error::Error::usage(
                "context-model gradient check needs the neighbor set".to_string(),
            ))
        }
        (false, _) => None,
    };

    let eval = |m: &Segmenter<T>| -> Result<f64> {
        let logits = match &n_e_const {
            Some(n_e) => {
                let input = tile_tensor::<T>(patch, cin, s)?;
                let i_e = encode_target(&m.encoder, &input)?;
                let opts = FusionOpts {
                    temperature: T::from_f64(m.config.softmax_temperature),
                    detach_target_slab: m.config.detach_target_slab,
                };
                let state = fuse_from_encodings(&i_e, n_e, m.gate.as_ref().unwrap(), opts)?;
                m.decoder.forward(&state.d_e)?
            }
            None => m.forward(patch, None, false)?,
        };
        Ok(cross_entropy(&logits, labels, None)?.item()?.to_f64())
    };

    // Analytic gradients from one recorded pass over the live code path.
    for p in model.params() {
        p.zero_grad();
    }
    let logits = model.forward(patch, neighbors, context_on)?;
    let loss = cross_entropy(&logits, labels, None)?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad().unwrap().iter().map(|&g| g.to_f64()).collect())
        .collect();

    let mut per_param = Vec::new();
    let mut overall: f64 = 0.0;
    for (pi, param) in model.params().iter().enumerate() {
        let base = param.data();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] = plus[i] + T::from_f64(step);
            param.assign(plus)?;
            let up = eval(model)?;

            let mut minus = base.clone();
            minus[i] = minus[i] - T::from_f64(step);
            param.assign(minus)?;
            let down = eval(model)?;

            param.assign(base.clone())?;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-7 {
                continue;
            }
            worst = worst.max((a - numeric).abs() / denom);
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: param.name().to_string(),
            max_rel_err: worst,
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tolerance,
        passed: overall < tolerance,
    })
}
