use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensor::Scalar;

use super::ops::Op;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// A tape of operations recorded in execution order.
///
/// Nodes are appended as ops run, so the node order is a topological order
/// and the backward sweep simply walks the tape from the end.
pub struct Graph<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not take gradients (input data, targets).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf holding a copy of `param`'s values.
    pub fn param(&mut self, param: &Tensor<T>) -> Var {
        let value = Tensor::new(param.shape().to_vec(), param.data().to_vec())
            .expect("tensor invariants already hold");
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that takes gradients, consuming the tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let value = Tensor::new(value.shape().to_vec(), value.into_data())
            .expect("tensor invariants already hold");
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Identifies the linear piece the tape was recorded on: which ReLU
    /// inputs were positive and which element each max-pool window picked.
    /// Two tapes with equal regions differ only through smooth ops.
    pub fn region(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => out.extend(
                    self.nodes[input.0].value.data().iter().map(|v| usize::from(*v > T::zero())),
                ),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar node, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {numel} values"),
            ));
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Reverse sweep from `root` with an explicit upstream gradient.
    pub fn backward_seeded(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[root.0].value.numel() {
            return Err(Error::dim("backward", "seed does not match root shape"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (target, contribution) in self.backward_node(i, &g) {
                debug_assert!(target.0 < i, "tape order violated");
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `var` into `param`'s gradient buffer.
    ///
    /// Returns false if the sweep never reached `var`.
    pub fn accumulate_into(&self, var: Var, param: &mut Tensor<T>) -> Result<bool> {
        match self.get(var) {
            Some(g) => {
                param.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
