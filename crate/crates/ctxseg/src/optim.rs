//! Adam optimizer with bias correction.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;

/// Moment buffers and step counter for one parameter set.
pub struct AdamState<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub step: u64,
    /// (first moment, second moment) per parameter, in parameter order.
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Rc<Parameter<T>>], learning_rate: T) -> Self {
        AdamState {
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            step: 0,
            moments: params
                .iter()
                .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
                .collect(),
        }
    }
}

/// One Adam update over `params`, consuming their current gradients.
/// Every parameter must carry a populated gradient buffer.
pub fn adam_step<T: Scalar>(params: &[Rc<Parameter<T>>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.moments.len() {
        return Err(Error::usage(format!(
            "adam_step: state tracks {} parameters, got {}",
            state.moments.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();

    for (param, (m, v)) in params.iter().zip(state.moments.iter_mut()) {
        let grad = param.grad().ok_or_else(|| {
            Error::usage(format!("adam_step: parameter '{}' has no gradient", param.name()))
        })?;
        let mut data = param.data();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (one - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (one - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        param.assign(data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = Parameter::new("w", vec![1.0f64, -2.0], &[2]).unwrap();
        let mut state = AdamState::new(&[p.clone()], 0.1);
        p.zero_grad();
        adam_step(&[p.clone()], &mut state).unwrap();
        assert_eq!(p.data(), vec![1.0, -2.0]);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let p = Parameter::new("w", vec![1.0f64], &[1]).unwrap();
        let mut state = AdamState::new(&[p.clone()], 0.1);
        assert!(matches!(
            adam_step(&[p], &mut state),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        // With bias correction, the very first update is -lr * g/(|g| + eps').
        let p = Parameter::new("w", vec![0.0f64, 0.0], &[2]).unwrap();
        let mut state = AdamState::new(&[p.clone()], 0.01);
        p.zero_grad();
        let dir = Tensor::new(vec![5.0, -0.3], &[2]).unwrap();
        let loss = p.value().mul(&dir).unwrap().sum_all();
        backward(&loss).unwrap();
        adam_step(&[p.clone()], &mut state).unwrap();
        let data = p.data();
        assert!((data[0] + 0.01).abs() < 1e-6, "got {}", data[0]);
        assert!((data[1] - 0.01).abs() < 1e-6, "got {}", data[1]);
    }

    use crate::tensor::Tensor;

    /// Plain scalar Adam, kept independent of the tensor machinery.
    struct ScalarAdam {
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, x: f64, g: f64) -> f64 {
            self.t += 1;
            self.m = self.b1 * self.m + (1.0 - self.b1) * g;
            self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
            let m_hat = self.m / (1.0 - self.b1.powi(self.t));
            let v_hat = self.v / (1.0 - self.b2.powi(self.t));
            x - self.lr * m_hat / (v_hat.sqrt() + self.eps)
        }
    }

    #[test]
    fn ten_steps_on_a_parabola_match_scalar_reference() {
        let p = Parameter::new("x", vec![1.0f64], &[1]).unwrap();
        let mut state = AdamState::new(&[p.clone()], 0.05);
        let mut reference = ScalarAdam {
            lr: 0.05,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut x_ref = 1.0f64;
        for _ in 0..10 {
            p.zero_grad();
            let value = p.value();
            let loss = value.mul(&value).unwrap().sum_all();
            backward(&loss).unwrap();
            adam_step(&[p.clone()], &mut state).unwrap();

            let g_ref = 2.0 * x_ref;
            x_ref = reference.step(x_ref, g_ref);
            assert!(
                (p.data()[0] - x_ref).abs() < 1e-12,
                "step diverged: {} vs {}",
                p.data()[0],
                x_ref
            );
        }
    }
}
