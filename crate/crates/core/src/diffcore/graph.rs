//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Each operator produces a [`Value`] node holding its result plus a closure
//! that routes an upstream gradient to the node's parents. `backward` walks
//! the recorded graph once, in reverse topological order. Parameter leaves
//! accumulate gradients across calls; intermediate nodes are transient per
//! call, so calling `backward` twice on the same loss exactly doubles every
//! parameter gradient.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

static NODE_IDS: AtomicU64 = AtomicU64::new(0);

type BackwardFn<T> = Box<dyn Fn(&[T])>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Value<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

/// Handle to a node of the recorded computation. Cheap to clone.
pub struct Value<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Value<T> {
    fn clone(&self) -> Self {
        Value(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Value<T> {
    fn leaf(tensor: Tensor<T>, requires_grad: bool) -> Self {
        Value(Rc::new(Node {
            id: NODE_IDS.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(tensor),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward_fn: None,
        }))
    }

    /// Leaf that gradients pass over: inputs, labels-as-data, frozen tables.
    pub fn constant(tensor: Tensor<T>) -> Self {
        Self::leaf(tensor, false)
    }

    /// Trainable leaf; `backward` accumulates into its grad slot.
    pub fn parameter(tensor: Tensor<T>) -> Self {
        Self::leaf(tensor, true)
    }

    /// Operator result. Requires grad iff any parent does; nodes with no
    /// differentiable ancestry are recorded as plain constants.
    pub(crate) fn from_op(
        tensor: Tensor<T>,
        parents: Vec<Value<T>>,
        backward_fn: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::leaf(tensor, false);
        }
        Value(Rc::new(Node {
            id: NODE_IDS.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(tensor),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward_fn: Some(backward_fn),
        }))
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    /// Copy of the wrapped tensor, cut loose from the graph.
    pub fn detach(&self) -> Tensor<T> {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.parents.is_empty()
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().as_ref().map(|g| {
            Tensor::from_parts(self.0.value.borrow().shape().to_vec(), g.clone())
        })
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the stored tensor in place (same shape). Used by optimizers
    /// and by the noisy-layer reinitialization, which must keep node identity.
    pub fn set_data(&self, tensor: Tensor<T>) {
        let mut v = self.0.value.borrow_mut();
        assert_eq!(v.shape(), tensor.shape(), "set_data shape changed");
        *v = tensor;
    }

    /// Mutate the stored data in place through a closure.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(self.0.value.borrow_mut().data_mut());
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                debug_assert_eq!(buf.len(), g.len());
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn id(&self) -> u64 {
        self.0.id
    }
}

/// Depth-first post-order over the ancestry of `root`: parents always appear
/// before their children in the returned list.
fn topo_order<T: Scalar>(root: &Value<T>) -> Vec<Value<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // Iterative DFS; the explicit stack carries (node, next-parent-index).
    let mut stack: Vec<(Value<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        if idx < node.0.parents.len() {
            let parent = node.0.parents[idx].clone();
            stack.push((node, idx + 1));
            if visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Run reverse-mode accumulation from a scalar loss. Every reachable
/// parameter's grad slot receives (or accumulates) d(loss)/d(param).
pub fn backward<T: Scalar>(loss: &Value<T>) -> Result<()> {
    {
        let v = loss.value();
        if !v.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", v.shape()),
            });
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite { context: "backward loss".to_string() });
        }
    }
    let order = topo_order(loss);
    // Intermediate grads are per-call scratch; parameter leaves persist.
    for node in &order {
        if !(node.is_leaf() && node.requires_grad()) {
            node.zero_grad();
        }
    }
    *loss.0.grad.borrow_mut() = Some(vec![T::one()]);
    for node in order.iter().rev() {
        if let Some(back) = &node.0.backward_fn {
            let grad = node.0.grad.borrow();
            if let Some(g) = grad.as_ref() {
                back(g);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ops;

    fn t1(data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w * w), w = (1,2,3)  =>  grad = (2,4,6)
        let w = Value::parameter(t1(vec![1.0, 2.0, 3.0]));
        let loss = ops::sum_all(&ops::mul(&w, &w).unwrap()).unwrap();
        assert_eq!(loss.value().item(), 14.0);
        backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_doubles_parameter_grads() {
        let w = Value::parameter(t1(vec![1.0, 2.0, 3.0]));
        // A two-deep chain exercises the intermediate-grad reset.
        let prod = ops::mul(&w, &w).unwrap();
        let scaled = ops::scale(&prod, 2.0).unwrap();
        let loss = ops::sum_all(&scaled).unwrap();
        backward(&loss).unwrap();
        let once = w.grad().unwrap();
        backward(&loss).unwrap();
        let twice = w.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x*x + x) : d/dx = 2x + 1
        let x = Value::parameter(t1(vec![3.0]));
        let sq = ops::mul(&x, &x).unwrap();
        let s = ops::add(&sq, &x).unwrap();
        let loss = ops::sum_all(&s).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Value::parameter(t1(vec![1.0, 2.0]));
        let y = ops::mul(&x, &x).unwrap();
        assert!(matches!(backward(&y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn constant_ancestry_is_not_recorded() {
        let a = Value::constant(t1(vec![1.0]));
        let b = Value::constant(t1(vec![2.0]));
        let c = ops::mul(&a, &b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.is_leaf());
    }
}
