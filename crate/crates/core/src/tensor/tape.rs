use std::collections::HashMap;

use super::ops::Op;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. A tape built with [`Tape::no_grad`] still evaluates every
/// operation but records no gradient rules.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    pub(crate) macs: u64,
    pub(crate) kl_clamp_events: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            macs: 0,
            kl_clamp_events: 0,
        }
    }

    /// A tape that evaluates but never records gradient rules.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a gradient rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Multiply-accumulates executed by conv and linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// How many KL evaluations had to clamp a zero reference probability.
    pub fn kl_clamp_events(&self) -> u64 {
        self.kl_clamp_events
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.fetch(id).clone();
        let requires_grad = trainable && self.grad_enabled;
        let v = self.push_node(value, requires_grad, Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_node(value, false, Op::Leaf)
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every registered trainable parameter, in id order.
    /// Parameters the loss did not reach get zero gradients.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result; the rule is kept only if some input needs a gradient.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, requires_grad, op)
    }

    /// Back-propagates from a one-element `loss`, filling gradients of every
    /// reachable node that requires one. Gradients from repeated uses of a
    /// node accumulate. Calling it again replaces the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                node.op.backward(&self.nodes, &node.value, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
