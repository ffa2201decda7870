//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward computation. Operations append nodes
//! holding the forward value plus a backward closure; [`Graph::backward`]
//! walks the tape in reverse creation order and accumulates gradients into
//! every node that requested them.
//!
//! The graph is define-by-run: build a fresh one per training step.
//!
//! ```
//! use varifocal::graph::Graph;
//! use varifocal::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let y = g.relu(x);
//! let loss = g.sum_all(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn FnOnce(&Tensor<E>) -> Vec<(Var, Tensor<E>)> + Send>;

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    back: Option<BackFn<E>>,
}

/// One recorded forward computation.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    ran_backward: bool,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
            check_finite: false,
        }
    }

    /// Enables a finiteness check on the output of every recorded operation
    /// and on every gradient. Used by tests; costs a full pass per tensor.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Registers an input tensor. `requires_grad` marks it for gradient
    /// accumulation during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `var`, if any was
    /// accumulated there.
    pub fn grad(&self, var: Var) -> Option<&Tensor<E>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Appends an op node. `back` receives the node's output gradient and
    /// returns per-parent contributions; it is dropped unrecorded when no
    /// parent needs gradients.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<E>,
        parents: &[Var],
        back: impl FnOnce(&Tensor<E>) -> Vec<(Var, Tensor<E>)> + Send + 'static,
    ) -> Result<Var> {
        if self.check_finite {
            value.check_finite("op output")?;
        }
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad: requires,
            back: if requires { Some(Box::new(back)) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar loss. Populates gradients on every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = &self.nodes[loss.0].value;
        if value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = Tensor::filled(value.shape(), E::one());
        self.backward_seeded(loss, seed)
    }

    /// Reverse pass seeding `var` with an explicit output gradient. Used
    /// where an upstream gradient is produced outside the graph.
    pub fn backward_seeded(&mut self, var: Var, seed: Tensor<E>) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Autodiff(
                "backward invoked twice without a new forward".into(),
            ));
        }
        if seed.shape() != self.nodes[var.0].value.shape() {
            return Err(Error::Autodiff(format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.nodes[var.0].value.shape()
            )));
        }
        self.ran_backward = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[var.0] = Some(seed);

        for id in (0..=var.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let Some(back) = self.nodes[id].back.take() else {
                continue;
            };
            let gout = self.grads[id].clone().expect("grad present");
            for (parent, contrib) in back(&gout) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if self.check_finite {
                    contrib.check_finite("gradient")?;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[5], 2.0), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[4], 3.0), true);
        let y = g.relu(x);
        let s = g.sum_all(y);
        let z = g.scale(s, 0.0);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[2], 1.0), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[3], 1.0), true);
        assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn grads_accumulate_across_uses() {
        // y = x + x  =>  dy/dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[3], 1.5), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[2], 1.0), true);
        let c = g.constant(Tensor::filled(&[2], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0; 2]);
        assert!(g.grad(c).is_none());
    }
}
