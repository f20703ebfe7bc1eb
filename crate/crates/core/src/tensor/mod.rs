//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted array. Operations on
//! tensors that require gradients record a backward node pointing at their
//! inputs; calling [`Tensor::backward`] on a scalar walks that graph in
//! reverse topological order and accumulates gradients into the leaves.
//! Tensors that do not require gradients keep no graph, so inference frees
//! intermediates as soon as they go out of scope.
//!
//! The op set is deliberately small: exactly what the separation network,
//! its losses and its tests need.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, DssError, Result};

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod scalar;
mod shape;

pub use conv::{Conv2dSpec, Padding2d};
pub use elementwise::{BinaryKind, UnaryKind};
pub use linalg::mac_counter;
pub use scalar::{DType, Scalar};


static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule of a recorded op. Returns one optional gradient per parent,
/// in parent order. Parents that do not require gradients may get `None`.
pub(crate) trait Backward<S: Scalar> {
    fn backward(&self, parents: &[Tensor<S>], out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>>;
}

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    op: Box<dyn Backward<S>>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    node: Option<Node<S>>,
}

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn build(data: Rc<Vec<S>>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<S>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return shape_err(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self::build(Rc::new(data), shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return shape_err(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self::build(Rc::new(data), shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(Rc::new(vec![S::zero(); numel(shape)]), shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::build(Rc::new(vec![value; numel(shape)]), shape.to_vec(), false, None)
    }

    pub fn scalar(value: S) -> Self {
        Self::build(Rc::new(vec![value]), Vec::new(), false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| S::cast(v)).collect(), shape)
    }

    /// Result of an op. Records the backward node only when some parent
    /// requires a gradient.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        op: Box<dyn Backward<S>>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, op });
        Self::build(Rc::new(data), shape, requires_grad, node)
    }

    /// Same data under a new shape, sharing the buffer.
    pub(crate) fn with_shared_data(&self, shape: Vec<usize>, parents: Vec<Tensor<S>>, op: Box<dyn Backward<S>>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, op });
        Self::build(self.inner.data.clone(), shape, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DssError::Shape(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let pgrads = node.op.backward(&node.parents, t.data(), &g);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

pub mod gradcheck;
