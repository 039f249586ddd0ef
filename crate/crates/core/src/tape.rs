//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value, the indices of
//! its inputs and (when any input needs a gradient) a backward rule. Nodes
//! are only ever appended, so the node order is a topological order and
//! `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient `grad` of the
    /// output. Entries where `wants[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation. The backward rule is dropped when
    /// no input participates in differentiation.
    pub fn record<B: Backward<T> + 'static>(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: B,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Test hook for negative controls: multiplies every gradient produced
    /// by `v`'s backward rule by `factor`. No effect on nodes without a rule.
    pub fn corrupt_backward(&mut self, v: Var, factor: f64) {
        if let Some(op) = self.nodes[v.0].op.take() {
            self.nodes[v.0].op = Some(Box::new(Scaled { inner: op, factor }));
        }
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient. Contributions along multiple paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    leaves.push((i, grad));
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &wants)?;
            for ((&j, g), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                let (Some(g), true) = (g, want) else { continue };
                if g.shape() != self.nodes[j].value.shape() {
                    return Err(Error::Contract(format!(
                        "backward rule `{}` produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[j].value.shape()
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // leaves the loss does not depend on still get an (all-zero) entry
        leaves.sort_by_key(|(i, _)| *i);
        let mut reached = leaves.into_iter().peekable();
        let mut all = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            match reached.peek() {
                Some((j, _)) if *j == i => all.push(reached.next().expect("peeked")),
                _ => all.push((i, Tensor::zeros(node.value.shape()))),
            }
        }
        Ok(Gradients { leaves: all })
    }
}

struct Scaled<T: Scalar> {
    inner: Box<dyn Backward<T>>,
    factor: f64,
}

impl<T: Scalar> Backward<T> for Scaled<T> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let f = T::of(self.factor);
        Ok(self
            .inner
            .backward(inputs, output, grad, wants)?
            .into_iter()
            .map(|g| g.map(|g| g.map(|v| v * f)))
            .collect())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<(usize, Tensor<T>)>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|pos| &self.leaves[pos].1)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let pos = self.leaves.binary_search_by_key(&v.0, |(i, _)| *i).ok()?;
        Some(self.leaves.remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
