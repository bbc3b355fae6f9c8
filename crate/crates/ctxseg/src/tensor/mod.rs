//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable n-dimensional array. Operations on tensors
//! that can influence a gradient-requiring leaf record a node holding the
//! parent handles and a backward rule; `backward` walks the recorded graph
//! in reverse creation order, which is a fixed topological order, so
//! gradient accumulation is bitwise reproducible for a given graph.
//!
//! Leaves created with [`Tensor::leaf`] own a gradient buffer. Everything
//! else receives its gradient transiently during the backward sweep.

mod ops;

pub use ops::{conv2d, cross_entropy};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of one recorded operation. Given the output gradient it
/// returns one optional gradient buffer per parent (`None` when the parent
/// does not require grad, so the work is skipped).
pub(crate) trait BackwardOp<T: Scalar> {
    fn backward(&self, grad: &[T], out_data: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T: Scalar> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn BackwardOp<T>>,
}

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    /// Gradient buffer; populated only on leaves.
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Immutable dense array, cheaply cloneable (shared handle).
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor from row-major data.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// Gradient-requiring leaf (parameter or probed input).
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::from_parts(
            t.inner.data.clone(),
            t.inner.shape.clone(),
            true,
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], vec![1], false, None)
    }

    fn from_parts(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Record the result of an op over `parents`. The node is kept only if
    /// some parent requires grad; otherwise the result is a plain constant.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: Box<dyn BackwardOp<T>>,
    ) -> Self {
        let track = parents.iter().any(|p| p.requires_grad());
        let node = track.then_some(Node { parents, op });
        Self::from_parts(data, shape, track, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none() && self.inner.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Value-identical tensor with no ancestry; gradients stop here.
    pub fn detach(&self) -> Tensor<T> {
        Self::from_parts(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Leaf gradient buffer, if populated.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset (and materialize) the leaf gradient buffer to zeros.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![T::zero(); self.numel()]);
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b = *b + v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }
}

/// Reverse-mode sweep from a scalar loss. Populates gradient buffers on
/// every reachable gradient-requiring leaf; frozen parameters and detached
/// subgraphs are simply absent from the graph and receive nothing.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::usage(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        // Loss built purely from constants: nothing to do.
        return Ok(());
    }

    // Collect every tensor reachable through recorded nodes.
    let mut seen: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if seen.contains_key(&t.id()) {
            continue;
        }
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.requires_grad() && !seen.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
        }
        seen.insert(t.id(), t);
    }

    // Reverse creation order is a topological order: parents always
    // precede children, so children flush before parents are visited.
    let mut order: Vec<Tensor<T>> = seen.into_values().collect();
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::one()]);

    for t in &order {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        match t.node() {
            Some(node) => {
                let parent_grads = node.op.backward(&g, t.data(), &node.parents);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match grads.entry(p.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                *a = *a + *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pg);
                        }
                    }
                }
            }
            None => {
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
            }
        }
    }
    Ok(())
}
