//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node holding data, an optional
//! gradient buffer, and the operation that produced it. Backward walks the
//! graph once in reverse topological order, accumulating (never overwriting)
//! gradients into shared parents, then frees the graph; leaf parameters keep
//! their gradient buffers until explicitly zeroed.
//!
//! Images follow the N×C×H×W convention throughout.

mod kernels;
mod ops;

pub(crate) use kernels::{gemm_nn, gemm_nt, gemm_tn};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled; used for inference and for
/// finite-difference re-evaluation.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule attached to a non-leaf node.
pub(crate) trait BackwardOp<S: Scalar> {
    /// Parents in a fixed order; drives the topological traversal.
    fn parents(&self) -> Vec<Tensor<S>>;
    /// Accumulates gradients into the parents given this node's output state.
    fn backward(&self, out_data: &[S], out_grad: &[S]);
}

pub(crate) struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: RefCell<Option<Box<dyn BackwardOp<S>>>>,
}

/// Handle to a tensor node. Clones share the node.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id, self.node.shape, self.node.requires_grad
        )
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Box<dyn BackwardOp<S>>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: RefCell::new(op),
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidArgument {
                op: "from_vec",
                msg: format!("{} elements do not fill shape {:?}", data.len(), shape),
            });
        }
        Ok(Self::new_node(data, shape.to_vec(), false, None))
    }

    /// Learnable leaf; receives and keeps gradients.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_param())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_node(vec![S::ZERO; n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::new_node(vec![value; n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_node(vec![value], vec![1], false, None)
    }

    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        op: Box<dyn BackwardOp<S>>,
    ) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::new_node(data, shape, true, Some(op))
        } else {
            Self::new_node(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.borrow().is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    /// Mutable access to the raw buffer; used by the optimizer and by
    /// checkpoint loading, both of which operate on leaves.
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.node.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of this tensor's data as a fresh constant leaf.
    pub fn detach(&self) -> Tensor<S> {
        Self::new_node(self.data().clone(), self.shape().to_vec(), false, None)
    }

    /// Marks a fresh leaf as learnable. Panics if the tensor already has
    /// consumers; intended for construction right after `from_vec`.
    pub fn into_param(mut self) -> Tensor<S> {
        let node = Rc::get_mut(&mut self.node).expect("into_param on shared tensor");
        node.requires_grad = true;
        self
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Visits every reachable node exactly once in reverse topological order,
    /// then releases each node's operation so the graph memory is reclaimed.
    /// Repeated forward/backward cycles accumulate into leaf gradients until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }

        // Iterative post-order DFS over parent edges; reversal is a valid
        // topological order (every consumer precedes its producers).
        let mut order: Vec<Rc<Node<S>>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Rc<Node<S>>, bool)> = vec![(Rc::clone(&self.node), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id) {
                continue;
            }
            stack.push((Rc::clone(&node), true));
            if let Some(op) = node.op.borrow().as_ref() {
                for p in op.parents() {
                    if p.node.requires_grad && !visited.contains(&p.node.id) {
                        stack.push((Rc::clone(&p.node), false));
                    }
                }
            }
        }

        self.accumulate_grad(&[S::ONE]);

        for node in order.iter().rev() {
            let op = node.op.borrow_mut().take();
            let Some(op) = op else { continue };
            let grad = node.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let data = node.data.borrow();
            op.backward(&data, &grad);
            // op drops here, releasing its parent handles.
        }
        Ok(())
    }

    pub(crate) fn same_node(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// NCHW accessor with validation.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::InvalidArgument {
                op: "dims4",
                msg: format!("expected 4-d N×C×H×W tensor, got {other:?}"),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [a, b] => Ok((*a, *b)),
            other => Err(Error::InvalidArgument {
                op: "dims2",
                msg: format!("expected 2-d tensor, got {other:?}"),
            }),
        }
    }
}
