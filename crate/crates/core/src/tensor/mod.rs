//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tensor`] that involves at least one input with
//! `requires_grad` records a node in a dynamically built graph. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse creation
//! order and accumulates gradients into the `requires_grad` leaves.
//!
//! The element type is generic: training runs on `f32`, finite-difference
//! checks run the same code on `f64`.

mod conv;
mod element;
mod gradcheck;
mod norm;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::{conv2d, maxpool2d, window_extent, Conv2dParams};
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use norm::{batchnorm2d, BatchNormMode, BN_EPS, BN_MOMENTUM};
pub use ops::*;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("{op}: invalid parameter: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Backward rule of a recorded operation.
///
/// `inputs` are the operation's inputs in the order they were recorded,
/// `output` is the forward value and `grad` the incoming gradient
/// (same length as `output`). Returns one entry per input; `None` marks an
/// input that receives no gradient.
pub trait Backward<T: Element> {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Reference-counted handle to an n-dimensional array.
///
/// Cloning a `Tensor` clones the handle, not the storage; parameters are
/// shared this way between a network and its optimizer.
pub struct Tensor<T: Element = f32>(Rc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_DISABLED: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|c| c.set(c.get() - 1));
        }
    }
    GRAD_DISABLED.with(|c| c.set(c.get() + 1));
    let _guard = Guard;
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|c| c.get() == 0)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Builds a constant (non-differentiable) leaf.
    pub fn new(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Builds a differentiable leaf (a parameter or an input under test).
    pub fn param(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> TensorResult<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    /// Records the result of an operation. A node is only attached when
    /// gradient recording is enabled and some input requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        op: impl Backward<T> + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            let node = Node {
                op: Box::new(op),
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            };
            Self::from_parts(shape, data, true, Some(node))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the operation that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the storage. Used by optimizers and loaders;
    /// mutating a tensor that is an input of a live graph invalidates the
    /// saved forward values of that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(v) => v.iter_mut().for_each(|x| *x = T::zero()),
            None => *g = Some(vec![T::zero(); self.numel()]),
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(v) => v.iter_mut().zip(delta).for_each(|(a, &d)| *a = *a + d),
            None => *g = Some(delta.to_vec()),
        }
    }

    /// A new constant leaf holding a copy of this tensor's values.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// A new differentiable leaf holding a copy of this tensor's values.
    pub fn detach_param(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), true, None)
    }

    /// Copies the values into a tensor of another element type (as a
    /// leaf with the same `requires_grad` flag).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.borrow().iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect();
        Tensor::from_parts(self.0.shape.clone(), data, self.requires_grad() && self.is_leaf(), None)
    }

    /// Reverse-mode sweep from a scalar. Gradients of every reachable
    /// `requires_grad` leaf are accumulated (not overwritten); the graph is
    /// left intact so a second call accumulates again.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            self.accumulate_grad(&[T::one()]);
            return Ok(());
        }

        // Inputs are always created before outputs, so descending id is a
        // valid reverse topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.id(), ()).is_some() {
                continue;
            }
            if let Some(node) = &t.0.node {
                for inp in &node.inputs {
                    if inp.requires_grad() && !seen.contains_key(&inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.0.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let out = t.0.data.borrow();
                    let input_grads = node.op.backward(&node.inputs, &out, &g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "{}", node.op.name());
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &d)| *a = *a + d),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        let s = Tensor::<f32>::scalar(3.0);
        assert_eq!(s.numel(), 1);
        assert!(s.shape().is_empty());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_zero_times_f_is_zero() {
        let x = Tensor::<f64>::param(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let y = scale(&sum(&relu(&x)), 0.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn backward_twice_doubles() {
        let x = Tensor::<f64>::param(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let y = sum(&mul(&x, &x).unwrap());
        y.backward().unwrap();
        let once = x.grad().unwrap();
        y.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.backward(), Err(TensorError::NonScalar(vec![2])));
    }

    #[test]
    fn zero_grad_sets_exact_zero() {
        let x = Tensor::<f32>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        sum(&x).backward().unwrap();
        x.zero_grad();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| relu(&x));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(grad_enabled());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x*x) + sum(x) ; df/dx = 2x + 1
        let x = Tensor::<f64>::param(&[2], vec![1.5, -0.5]).unwrap();
        let a = sum(&mul(&x, &x).unwrap());
        let b = sum(&x);
        add(&a, &b).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 0.0]);
    }
}
