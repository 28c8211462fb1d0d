//! Dense tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every operation that touches a tracked tensor records the backward
//! closure on the result node. `backward()` topologically sorts the
//! graph from the loss and replays it in reverse, visiting each node
//! exactly once. Gradients accumulate additively, so a leaf reached by
//! two paths receives the sum.

mod conv;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward record for one executed operation: the parents it read and
/// the vector-Jacobian product mapping the output gradient to one
/// gradient buffer per parent.
pub(crate) struct Op<T: Scalar> {
    parents: Vec<Tensor<T>>,
    vjp: Box<dyn Fn(&[T], &[T]) -> Vec<Vec<T>>>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: RefCell<Option<Op<T>>>,
}

/// A dense row-major tensor. Cheap to clone (shared handle); the value
/// buffer is immutable after construction.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor whose gradient is retained by `backward()`.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(data, shape)?;
        Rc::get_mut(&mut t.inner).unwrap().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::raw(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    fn raw(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op: RefCell::new(op),
            }),
        }
    }

    /// Builds an op output, recording the vjp only when some parent is
    /// on a differentiable path.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: Box<dyn Fn(&[T], &[T]) -> Vec<Vec<T>>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = parents.iter().any(|p| p.tracked());
        let op = if tracked { Some(Op { parents, vjp }) } else { None };
        Self::raw(data, shape, false, op)
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

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this node participates in gradient propagation.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.op.borrow().is_some()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, detached from the graph (stop-gradient).
    pub fn detach(&self) -> Tensor<T> {
        Self::raw(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    fn accum_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every leaf
    /// with `requires_grad`; consumes the recorded ops so the graph is
    /// freed afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS over nodes that still carry an op.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            let children: Vec<Tensor<T>> = node
                .inner
                .op
                .borrow()
                .as_ref()
                .map(|op| op.parents.clone())
                .unwrap_or_default();
            stack.push((node, true));
            for c in children {
                if c.inner.op.borrow().is_some() || c.inner.requires_grad {
                    stack.push((c, false));
                }
            }
        }

        self.accum_grad(&[T::one()]);
        for node in order.iter().rev() {
            let op = node.inner.op.borrow_mut().take();
            let Some(op) = op else { continue };
            let grad_opt = node.inner.grad.borrow().clone();
            if let Some(g) = grad_opt {
                let parent_grads = (op.vjp)(&g, &node.inner.data);
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for (p, pg) in op.parents.iter().zip(parent_grads) {
                    if p.tracked() {
                        debug_assert_eq!(pg.len(), p.numel());
                        p.accum_grad(&pg);
                    }
                }
            }
            if !node.inner.requires_grad {
                node.clear_grad();
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("data", &self.inner.data)
            .finish()
    }
}

/// Central finite-difference check of reverse-mode gradients.
///
/// Returns the maximum over components of
/// `|analytic − (f(x+εeᵢ) − f(x−εeᵢ))/2ε| / (|analytic| + ε)`.
/// `f` must be pure and deterministic.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let leaf = Tensor::param(x.data().to_vec(), x.shape())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar-valued f".into()));
    }
    y.backward()?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::Contract("f does not depend on x".into()))?;

    let two = T::from_f64(2.0);
    let mut max_err = T::zero();
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + eps;
        let mut minus = base.clone();
        minus[i] = minus[i] - eps;
        let fp = f(&Tensor::new(plus, x.shape())?)?.item();
        let fm = f(&Tensor::new(minus, x.shape())?)?.item();
        let numeric = (fp - fm) / (two * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + eps);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
