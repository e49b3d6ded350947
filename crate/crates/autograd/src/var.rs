use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::float::Float;
use crate::tensor::Tensor;

/// Computes parent gradients from the output gradient.
///
/// Receives the output gradient, the parent variables and a mask telling which
/// parents need a gradient; returns one entry per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &[bool]) -> Vec<Option<Tensor<T>>>>;

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// While alive, operations record no graph (inference mode).
pub struct NoGradGuard {
    _private: (),
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard { _private: () }
}

pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

struct Node<T: Float> {
    id: usize,
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A node of the computation graph. Cloning is cheap (shared handle).
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.borrow().shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A trainable leaf.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            requires_grad,
        }))
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Replaces the stored value (optimizer updates, weight loading).
    pub fn set_value(&self, value: Tensor<T>) {
        let mut slot = self.0.value.borrow_mut();
        assert_eq!(slot.shape(), value.shape(), "set_value shape mismatch");
        *slot = value;
    }

    pub fn update_value(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Tensor<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached copy sharing no graph history.
    pub fn detach(&self) -> Var<T> {
        Var::constant(self.value().clone())
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on a non-scalar");
        v.data()[0]
    }

    fn accumulate(&self, g: Tensor<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from this scalar. Gradients accumulate into every leaf
    /// that requires them; intermediate gradients are released.
    pub fn backward(&self) {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar output");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        self.accumulate(Tensor::ones(self.value().shape()));
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(grad) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let needs: Vec<bool> = node.0.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = backward(&grad, &node.0.parents, &needs);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for ((parent, g), need) in node.0.parents.iter().zip(parent_grads).zip(needs) {
                if let (Some(g), true) = (g, need) {
                    debug_assert_eq!(g.shape(), parent.value().shape());
                    parent.accumulate(g);
                }
            }
        }
    }

    /// Post-order over nodes that require gradients.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
