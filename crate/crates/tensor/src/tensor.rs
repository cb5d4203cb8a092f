//! Core tensor type and the reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a shared handle (`Rc`) to a dense row-major buffer plus the
//! bookkeeping autodiff needs: the tensors it was computed from and a closure
//! that routes an incoming output gradient to those inputs. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients on every reachable tensor that requires
//! them.
//!
//! Graph-building can be switched off for a scope with [`no_grad`]; ops then
//! produce plain leaf tensors and retain no inputs, which keeps inference
//! memory flat.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Gradient routine of an op: receives the output gradient and accumulates
/// into the input tensors it captured.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T])>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether ops on this thread currently record the autodiff graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Ops executed inside produce detached results: no parents are retained and
/// no backward closures are built, so intermediate buffers free as soon as
/// they go out of scope. The previous state is restored on exit.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    /// Input tensors, kept alive for graph traversal. Empty for leaves.
    parents: Vec<Tensor<T>>,
    /// Present exactly when this tensor is a recorded op output.
    backward_fn: Option<BackwardFn<T>>,
}

/// Dense multi-dimensional array of [`Scalar`]s with reverse-mode autodiff.
///
/// Cloning is cheap and aliases the same storage; tensors are immutable once
/// produced by an op. Leaf tensors (parameters, inputs) may be rewritten in
/// place through [`Tensor::set_data`] between graph builds.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("is_op_output", &self.inner.backward_fn.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    /// Builds a leaf tensor from a flat row-major buffer.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                context: "from_vec: element count does not match shape",
                shape: shape.to_vec(),
            });
        }
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    /// Leaf tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![T::zero(); numel], shape.to_vec(), false)
    }

    /// Leaf tensor filled with a constant.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![value; numel], shape.to_vec(), false)
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::new_leaf(vec![value], vec![1], false)
    }

    /// Marks this tensor (builder style) and returns it.
    pub fn with_requires_grad(self, requires: bool) -> Self {
        self.set_requires_grad(requires);
        self
    }

    fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Builds an op output. `backward` must be `Some` exactly when the graph
    /// is being recorded and at least one parent requires grad (callers check
    /// with [`Tensor::graph_needed`]); with `None` the parents are dropped and
    /// the result is an ordinary detached leaf.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        match backward {
            Some(backward_fn) => Tensor {
                inner: Rc::new(Inner {
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(true),
                    parents,
                    backward_fn: Some(backward_fn),
                }),
            },
            None => Self::new_leaf(data, shape, false),
        }
    }

    /// True when an op over `parents` must record a backward closure.
    pub(crate) fn graph_needed(parents: &[&Tensor<T>]) -> bool {
        is_grad_enabled() && parents.iter().any(|p| p.requires_grad())
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    /// Shape of the tensor (row-major layout).
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    /// Number of axes.
    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Whether gradients accumulate on this tensor during backward.
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient accumulation. Intended for leaves (parameters);
    /// op outputs manage this flag themselves.
    pub fn set_requires_grad(&self, requires: bool) {
        debug_assert!(
            self.inner.backward_fn.is_none() || requires,
            "disabling requires_grad on a recorded op output breaks its graph"
        );
        self.inner.requires_grad.set(requires);
        if !requires {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    /// Copies the data out as a flat row-major vector.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Borrows the data buffer without copying (crate-internal fast path).
    pub(crate) fn borrow_data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape {
                context: "item: tensor has more than one element",
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrites the data buffer of a leaf in place.
    ///
    /// Used by the optimizer, checkpoint loading, and finite-difference
    /// probing. The tensor must not be a live op output.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::InvalidShape {
                context: "set_data: value count does not match shape",
                shape: self.shape().to_vec(),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Applies an in-place update to the data buffer (optimizer internals).
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Detached copy: same values, fresh storage, no graph, no grad.
    pub fn detach(&self) -> Self {
        Self::new_leaf(self.to_vec(), self.inner.shape.clone(), false)
    }

    // ------------------------------------------------------------------
    // Gradients
    // ------------------------------------------------------------------

    /// Copies the accumulated gradient out, if any has been recorded.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Resets the gradient to zeros (or clears it when grads are disabled).
    ///
    /// Calling this on every parameter before `backward` guarantees that a
    /// parameter the loss does not depend on reads back an exact zero
    /// gradient rather than an absent one.
    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        if self.inner.requires_grad.get() {
            *g = Some(vec![T::zero(); self.numel()]);
        } else {
            *g = None;
        }
    }

    /// Adds `delta` into the gradient buffer. No-op when this tensor does not
    /// require grad, which is what lets frozen parameters sit inside a
    /// trainable graph for free.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if !self.inner.requires_grad.get() {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Scales the gradient buffer in place (global-norm clipping).
    pub(crate) fn scale_grad(&self, factor: T) {
        if let Some(buf) = self.inner.grad.borrow_mut().as_mut() {
            for g in buf.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds this tensor's gradient with 1 and propagates through the graph
    /// in reverse topological order. Gradients accumulate, so zero them (or
    /// use fresh graphs) between calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidOperation(format!(
                "backward() requires a single-element tensor, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(TensorError::InvalidOperation(
                "backward() on a tensor that does not require grad".to_string(),
            ));
        }

        // Iterative post-order DFS; reversed, it yields a topological order
        // in which every consumer runs before the tensors it consumed, so
        // each node's gradient is complete when its backward closure fires.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            let key = Rc::as_ptr(&node.inner) as *const ();
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in &node.inner.parents {
                let pkey = Rc::as_ptr(&parent.inner) as *const ();
                if parent.inner.backward_fn.is_some() && !visited.contains(&pkey) {
                    stack.push((parent.clone(), false));
                }
            }
        }

        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(backward_fn) = &node.inner.backward_fn {
                let grad = node.inner.grad.borrow().clone();
                if let Some(grad) = grad {
                    backward_fn(&grad);
                }
            }
        }
        Ok(())
    }
}
