//! Dense row-major tensors with a recorded computation graph.
//!
//! Every operation produces a new immutable [`Tensor`]. When any input
//! requires a gradient, the output keeps a backward closure and handles to
//! its inputs, so the graph is the set of tensors reachable from a root.
//! [`Tensor::backward`] orders that set topologically and accumulates
//! gradients into the leaves. Leaf gradients accumulate across calls; callers
//! reset them with [`Tensor::zero_grad`] before each backward pass.

mod conv;
mod linalg;
mod norm;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv_transpose2d, max_pool2d, Conv2dSpec};
pub use norm::{batch_norm2d, BatchNormState, BnMode};

/// Floating-point element type of a tensor (`f32` or `f64`).
pub trait Element:
    Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Backward rule: receives the output gradient and the output data, returns
/// one optional gradient per input (in input order).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Reference-counted handle to an immutable tensor. Cloning is cheap.
pub struct Tensor<T: Element>(Rc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Element>(what: &str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {}", data[i]))),
        None => Ok(()),
    }
}

impl<T: Element> Tensor<T> {
    /// Builds a constant tensor, validating shape and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Builds a trainable leaf (gradients are accumulated into it).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        Ok(Self::raw(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![1], vec![value], false, None)
    }

    fn raw(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Records the result of an operation. The backward rule is kept only
    /// when at least one input participates in differentiation.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: shape/data length");
        #[cfg(debug_assertions)]
        if let Err(e) = check_finite(op, &data) {
            panic!("{e}");
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::raw(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the operation that produced this tensor (`"leaf"` otherwise).
    pub fn op_name(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Elementwise cast to another precision (a graph boundary).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::raw(self.0.shape.clone(), data, false, None)
    }

    /// Reverse-mode differentiation from a scalar root.
    ///
    /// Gradients are added to whatever the leaves already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage("backward root does not depend on any trainable leaf".into()));
        }
        let graph = Graph::from_root(self);
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in graph.order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                Some(node) => {
                    let grads = (node.backward)(&g, &t.0.data);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "{}: grad arity", node.op);
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        #[cfg(debug_assertions)]
                        if let Err(e) = check_finite(node.op, &grad) {
                            panic!("backward of {e}");
                        }
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the operations reachable from a root.
pub struct Graph<T: Element> {
    order: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    /// Orders every gradient-carrying tensor reachable from `root` so that
    /// each operation's inputs precede it. Each tensor appears once.
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (tensor, children expanded?)
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Operation names in execution order.
    pub fn ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.order.iter().map(|t| t.op_name())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.order
    }
}
