//! Reverse-mode automatic differentiation.
//!
//! Operators implement [`Op`]: a forward rule producing the output tensor
//! and a backward rule mapping the output gradient to input gradients.
//! [`Tape::apply`] runs the forward rule and appends a node; nodes are only
//! given a backward rule when at least one input needs a gradient.
//! [`Tape::backward`] walks the nodes in exact reverse recording order and
//! accumulates gradients additively, so fan-out is handled for free.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-input gradients returned by [`Op::backward`]. Entries for inputs that
/// do not need a gradient may be `None`.
pub type InputGrads = Vec<Option<Vec<f64>>>;

pub trait Op {
    fn name(&self) -> &'static str;

    /// Computes the output. May cache whatever the backward rule needs.
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// `grad_out` has the output's length. `needs[i]` tells whether input `i`
    /// wants a gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Result<InputGrads>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    generation: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_visits: Vec<usize>,
}

/// Arena of recorded values and operators. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.detached(), Vec::new(), None, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var {
        self.push(tensor.detached(), Vec::new(), None, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&self, tensor: Tensor) -> Var {
        self.push(tensor.detached(), Vec::new(), None, true)
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, op: Option<Box<dyn Op>>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var {
            id,
            generation: inner.generation,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        let inner = self.inner.borrow();
        if v.generation != inner.generation || v.id >= inner.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(())
    }

    /// Runs `op` forward on `inputs` and records it.
    pub fn apply(&self, mut op: impl Op + 'static, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, requires_grad) = {
            let inner = self.inner.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &inner.nodes[v.id].value).collect();
            let value = op.forward(&values)?;
            value.check_finite(op.name())?;
            let rg = inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
            (value, rg)
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        let op: Option<Box<dyn Op>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(value, ids, op, requires_grad))
    }

    pub fn value(&self, v: Var) -> Result<Ref<'_, Tensor>> {
        self.check(v)?;
        Ok(Ref::map(self.inner.borrow(), |inner| &inner.nodes[v.id].value))
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.inner.borrow().nodes[v.id].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node. Vars from before the reset become invalid.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.generation += 1;
        inner.nodes.clear();
        inner.grads.clear();
        inner.backward_visits.clear();
    }

    /// Populates gradients of every node that needs one by reverse traversal
    /// from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let root = &inner.nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        inner.grads = vec![None; inner.nodes.len()];
        inner.backward_visits.clear();
        if !root.requires_grad {
            return Ok(());
        }
        inner.grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad_out) = inner.grads[id].take() else {
                continue;
            };
            inner.backward_visits.push(id);
            let values: Vec<&Tensor> = node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| inner.nodes[i].requires_grad).collect();
            let input_grads = op.backward(&values, &node.value, &grad_out, &needs)?;
            for ((&input, grad), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(grad), true) = (grad, need) else {
                    continue;
                };
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite { op: op.name() });
                }
                match &mut inner.grads[input] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
            // Keep the gradient of the node itself readable after the pass.
            inner.grads[id] = Some(grad_out);
        }
        Ok(())
    }

    /// Gradient of `v` from the last [`Tape::backward`] call, if it received one.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        self.check(v)?;
        let inner = self.inner.borrow();
        let Some(Some(g)) = inner.grads.get(v.id) else {
            return Ok(None);
        };
        Tensor::new(inner.nodes[v.id].value.shape(), g.clone()).map(Some)
    }

    /// Ids of nodes that carry a backward rule, in recording order.
    pub fn recorded_ops(&self) -> Vec<(usize, &'static str)> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.op.as_ref().map(|op| (i, op.name())))
            .collect()
    }

    /// Node ids in the order the last backward pass visited them.
    pub fn backward_visits(&self) -> Vec<usize> {
        self.inner.borrow().backward_visits.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_backward_is_one() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0]);
    }

    #[test]
    fn stale_var_rejected_after_reset() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        tape.reset();
        assert!(matches!(tape.value(x), Err(Error::StaleVar)));
        assert!(matches!(tape.backward(x), Err(Error::StaleVar)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0).unwrap());
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b).unwrap());
        assert!(tape.recorded_ops().is_empty());
    }
}
