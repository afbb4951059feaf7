//! Reverse-mode automatic differentiation on dense tensors.
//!
//! Define-by-run tape: every operation allocates a fresh node holding
//! its output data, handles to its parents, and a closure that routes
//! the node's gradient into the parents. Node ids come from a global
//! monotonic counter, so replaying nodes in descending id order is a
//! valid reverse topological order and `backward` needs no explicit
//! graph analysis.
//!
//! Shape errors are programming errors and panic with the operation
//! name and the offending shapes. Gradients accumulate (`+=`) so a
//! tensor used twice receives both contributions.

mod conv;
mod gradcheck;
mod ops;
mod scalar;

pub use gradcheck::{grad_check, grad_check_seeded, FD_STEP, FD_TOL};
pub use ops::layer_norm_last;
pub use scalar::Scalar;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Shared handle to a tape node. Cloning is cheap and aliases the
/// same storage, which is how parameters are shared between a model
/// and its optimizer.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    // ---- constructors ----

    /// Leaf tensor from raw data. Panics if `data.len()` does not
    /// match the shape product.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "from_vec: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![T::ZERO; numel], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![value; numel], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Trainable leaf: same as [`from_vec`] but participates in
    /// gradient computation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_vec(data, shape).requires_grad(true)
    }

    /// Returns a handle to the same storage with `requires_grad` set.
    /// Only meaningful on leaves; op outputs derive the flag from
    /// their parents.
    pub fn requires_grad(self, flag: bool) -> Self {
        if self.node.requires_grad == flag {
            return self;
        }
        assert!(
            self.node.backward.is_none(),
            "requires_grad can only be toggled on leaf tensors"
        );
        let data = self.node.data.borrow().clone();
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.node.shape.clone(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: flag,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Internal op constructor: output requires grad iff any parent
    /// does, and the tape entry is recorded only in that case.
    pub(crate) fn make_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "op output length mismatch for shape {:?}", shape);
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let (parents, backward): (Vec<_>, Option<BackwardFn<T>>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    // ---- accessors ----

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.node.requires_grad
    }

    /// Stable identity of the underlying node, used to key optimizer
    /// state.
    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites the stored values in place (optimizer step). Length
    /// must match.
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Adds `scale * delta` into the stored values in place.
    pub fn add_scaled(&self, delta: &[T], scale: T) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), delta.len(), "add_scaled length mismatch");
        for (di, &gi) in d.iter_mut().zip(delta) {
            *di += scale * gi;
        }
    }

    /// New leaf with copied data, cut off from the tape.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.to_vec(), &self.node.shape)
    }

    pub(crate) fn accum_grad(&self, contrib: &[T]) {
        if !self.node.requires_grad {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (bi, &ci) in buf.iter_mut().zip(contrib) {
                    *bi += ci;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    // ---- engine ----

    /// Reverse pass from a scalar loss. Every tensor reachable through
    /// the tape with `requires_grad` ends up with an accumulated
    /// gradient; call [`zero_grad`] on parameters between steps.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );
        assert!(
            self.node.requires_grad,
            "backward() on a tensor that does not require grad"
        );

        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Descending id is a reverse topological order because every
        // op output is created after its inputs.
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        self.accum_grad(&[T::ONE]);
        for n in &nodes {
            let g = n.node.grad.borrow().clone();
            if let (Some(g), Some(f)) = (g, n.node.backward.as_ref()) {
                f(&g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_backward() {
        // loss = (2x)^2 at x=3 -> dloss/dx = 8x = 24
        let x = Tensor::param(vec![3.0f64], &[1]);
        let y = x.mul_scalar(2.0);
        let loss = y.square().sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![24.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = x*x + 3x -> grad = 2x + 3 = 7 at x=2
        let x = Tensor::param(vec![2.0f64], &[1]);
        let loss = x.mul(&x).add(&x.mul_scalar(3.0)).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_inputs_record_no_tape() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0], &[2]);
        let b = a.mul_scalar(5.0);
        assert!(!b.requires_grad_flag());
        assert!(b.node.backward.is_none());
        assert!(b.node.parents.is_empty());
    }

    #[test]
    fn grads_accumulate_across_backward_calls_until_cleared() {
        let x = Tensor::param(vec![1.0f64], &[1]);
        let l1 = x.mul_scalar(2.0).sum_all();
        l1.backward();
        let l2 = x.mul_scalar(4.0).sum_all();
        l2.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "backward() requires a scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        x.mul_scalar(2.0).backward();
    }

    #[test]
    fn set_data_feeds_later_ops() {
        let x = Tensor::param(vec![1.0f64], &[1]);
        x.set_data(&[10.0]);
        let y = x.mul_scalar(2.0);
        assert_eq!(y.item(), 20.0);
    }
}
