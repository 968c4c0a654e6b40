use std::collections::BTreeMap;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    param: Option<usize>,
}

/// Linear record of executed operations. Nodes are appended in execution
/// order, so every node's parents precede it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false, None, "constant")
    }

    /// Records a differentiable input that is not a model parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, None, "leaf")
    }

    /// Records a model parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, Some(id), "param")
    }

    fn push_leaf(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        param: Option<usize>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    ///
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                node.op.backward(&self.nodes, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[id]) {
                let t = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                params
                    .entry(pid)
                    .and_modify(|acc: &mut Tensor| {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    })
                    .or_insert(t);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if any flowed.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }
}

/// Returns the gradient buffer of `id`, allocating zeros on first use.
/// Returns `None` when the node does not participate in differentiation.
pub(crate) fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}
