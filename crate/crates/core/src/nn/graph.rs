//! The computation graph: reference-counted nodes built op by op, consumed by
//! one reverse-mode sweep.
//!
//! Graphs are rebuilt for every forward pass (define-by-run). A [`Var`] whose
//! ancestry contains no gradient-requiring leaf stores neither parents nor a
//! backward closure, so pure inference never retains intermediate buffers.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use super::{NnError, Tensor};

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

/// Accumulates gradients into the `parents` given the gradient of the node's
/// own output.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Var])>;

pub(crate) struct Node {
    id: u64,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A value in the computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

impl Var {
    /// A graph leaf. Gradients accumulate on it only if `requires_grad`.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// A leaf that never takes gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    /// An interior node produced by an op.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            // Dead branch for autodiff: drop the closure and the upstream
            // graph so inference doesn't hold activations alive.
            (Vec::new(), None)
        };
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.node.value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// The gradient accumulated by the last [`Var::backward`] call, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad.borrow().clone()
    }

    /// Same value, severed from the graph: gradients do not flow past it.
    pub fn detach(&self) -> Var {
        Var::constant(self.node.value.clone())
    }

    pub(crate) fn accum_grad(&self, delta: &Tensor) {
        if !self.node.requires_grad {
            return;
        }
        debug_assert_eq!(self.shape(), delta.shape(), "gradient shape mismatch");
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate on every
    /// gradient-requiring leaf reachable from `self`; repeated calls on
    /// overlapping graphs keep accumulating until the leaves are rebuilt.
    pub fn backward(&self) -> Result<(), NnError> {
        if self.value().numel() != 1 {
            return Err(NnError::NonScalarOutput(
                self.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        self.accum_grad(&Tensor::full(self.shape().to_vec(), 1.0));

        // Iterative post-order DFS; reversed, it is a topological order with
        // every node visited after all of its consumers.
        let mut order: Vec<Var> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((var, child)) = stack.pop() {
            if child < var.node.parents.len() {
                stack.push((var.clone(), child + 1));
                let parent = var.node.parents[child].clone();
                if parent.requires_grad() && visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(var);
            }
        }

        for var in order.iter().rev() {
            if let Some(back) = &var.node.backward {
                let grad = var.node.grad.borrow().clone();
                if let Some(grad) = grad {
                    back(&grad, &var.node.parents);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Var::leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(x.backward(), Err(NnError::NonScalarOutput(_))));
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // y = mean(x * x); dy/dx = 2x / n, with x feeding mul twice.
        let x = Var::leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let y = ops::mean_all(&ops::mul(&x, &x).unwrap());
        y.backward().unwrap();
        let g = x.grad().unwrap();
        let want = [2.0 / 3.0, -4.0 / 3.0, 6.0 / 3.0];
        for (gi, wi) in g.data().iter().zip(&want) {
            assert!((gi - wi).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Var::leaf(Tensor::from_vec(vec![1.5]), true);
        let y = ops::mean_all(&ops::mul(&x.detach(), &x).unwrap());
        y.backward().unwrap();
        // Only the non-detached path contributes: d/dx [c·x] = c = 1.5.
        assert_eq!(x.grad().unwrap().data(), &[1.5]);
    }

    #[test]
    fn constant_graph_backward_is_a_no_op() {
        let x = Var::constant(Tensor::from_vec(vec![2.0]));
        let y = ops::mean_all(&ops::mul(&x, &x).unwrap());
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
