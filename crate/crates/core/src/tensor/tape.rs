//! The gradient tape.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes, each
//! holding its output value and a backward closure that scatters the upstream
//! gradient to the node's parents. Gradients are produced by walking the node
//! list in reverse — the list order is already a topological order because
//! every operation's inputs precede it.
//!
//! Nodes whose subtree contains no trainable leaf never store a backward
//! closure, so inference-only passes pay no backward bookkeeping.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    trainable: bool,
    backward: Option<BackwardFn>,
}

/// Accumulates gradient contributions during the reverse sweep.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    active: &'a [bool],
}

impl GradSink<'_> {
    /// Add `contribution` to the gradient of `var`. Contributions to nodes
    /// that do not require gradients are dropped.
    pub(crate) fn add(&mut self, var: Var, contribution: Tensor) {
        if !self.active[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(g) => {
                g.add_assign(&contribution)
                    .expect("gradient shape mismatch during accumulation");
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register an input tensor. Only trainable leaves (and values computed
    /// from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: trainable,
            trainable,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant input (untrainable leaf).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Append an operation node. `make_backward` is only invoked when some
    /// parent requires gradients, which prunes dead backward closures.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward = needs_grad.then(make_backward);
        self.nodes.push(Node {
            value,
            needs_grad,
            trainable: false,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output, seeding with dL/dL = 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward() needs a scalar output; use backward_with() to seed a shaped gradient",
            ));
        }
        let seed = Tensor::ones(self.nodes[output.0].value.shape());
        self.backward_with(output, seed)
    }

    /// Reverse sweep from `output`, seeding its gradient with `seed`
    /// (dL/d_output computed externally, e.g. by an analytic loss).
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::invalid(format!(
                "gradient seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[output.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        let active: Vec<bool> = self.nodes.iter().map(|nd| nd.needs_grad).collect();
        if !active[output.0] {
            // No trainable leaf feeds the output; nothing to do.
            return Ok(());
        }
        self.grads[output.0] = Some(seed);

        // Split borrows: closures live in `nodes`, accumulation in `grads`.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for id in (0..=output.0).rev() {
            let Some(bwd) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let (done, rest) = grads.split_at_mut(id);
                let mut sink = GradSink {
                    grads: done,
                    active: &active[..id],
                };
                bwd(&g, &mut sink);
                let _ = rest;
            }
            grads[id] = Some(g);
        }

        // Every trainable leaf must end up with a gradient of its own shape;
        // leaves the output does not depend on get explicit zeros.
        for id in 0..n {
            if nodes[id].trainable && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(nodes[id].value.shape()));
            }
            if let Some(g) = &grads[id] {
                debug_assert_eq!(g.shape(), nodes[id].value.shape());
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `var`, if one was produced.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Scalar convenience accessor for rank-1 single-element outputs.
    pub fn value_scalar(&self, var: Var) -> Result<Scalar> {
        let t = self.value(var);
        if t.len() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar value, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn trainable_leaf_gets_zero_grad_when_unused() {
        let mut tape = Tape::new();
        let unused = tape.leaf(Tensor::zeros(&[3]), true);
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul_scalar(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn constant_subgraph_is_pruned() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul_scalar(c, 2.0);
        assert!(!tape.needs_grad(y));
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
    }
}
