//! Named trainable parameters.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named, gradient-requiring leaf tensor.
///
/// `value()` hands out the live leaf handle; while the parameter is frozen
/// it hands out a detached copy instead, so a forward pass over a frozen
/// parameter records no graph and contributes exactly zero gradient.
pub struct Parameter<T: Scalar> {
    name: String,
    tensor: RefCell<Tensor<T>>,
    frozen: Cell<bool>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Rc<Self>> {
        Ok(Rc::new(Parameter {
            name: name.into(),
            tensor: RefCell::new(Tensor::leaf(data, shape)?),
            frozen: Cell::new(false),
        }))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor.borrow().numel()
    }

    /// Handle used in forward passes. Frozen: a detached constant.
    pub fn value(&self) -> Tensor<T> {
        let t = self.tensor.borrow();
        if self.frozen.get() {
            t.detach()
        } else {
            t.clone()
        }
    }

    /// Current data, ignoring the frozen flag.
    pub fn data(&self) -> Vec<T> {
        self.tensor.borrow().to_vec()
    }

    /// Replace the parameter value with a fresh leaf (optimizer updates,
    /// checkpoint restore, finite-difference probes). Shape must match.
    pub fn assign(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        if data.len() != self.numel() {
            return Err(Error::dim(format!(
                "assign to '{}': {} values for shape {:?}",
                self.name,
                data.len(),
                shape
            )));
        }
        *self.tensor.borrow_mut() = Tensor::leaf(data, &shape)?;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.borrow().zero_grad();
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.set(frozen);
    }
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Parameter('{}', shape={:?}, frozen={})",
            self.name,
            self.shape(),
            self.frozen.get()
        )
    }
}

/// Freezes a set of parameters for the lifetime of the guard.
pub struct FreezeGuard<T: Scalar> {
    params: Vec<Rc<Parameter<T>>>,
}

impl<T: Scalar> FreezeGuard<T> {
    pub fn freeze(params: &[Rc<Parameter<T>>]) -> Self {
        for p in params {
            p.set_frozen(true);
        }
        FreezeGuard {
            params: params.to_vec(),
        }
    }
}

impl<T: Scalar> Drop for FreezeGuard<T> {
    fn drop(&mut self) {
        for p in &self.params {
            p.set_frozen(false);
        }
    }
}
