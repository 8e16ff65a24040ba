//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward evaluation. Nodes are
//! immutable once written; [`Tape::backward`] replays the record in reverse
//! and accumulates `∂loss/∂leaf` into each gradient-tracking leaf. Gradients
//! add into the leaf slot until [`Tape::zero_grad`] clears it.
//!
//! Composite kernels (fused linear, layer/batch norm, multi-head attention)
//! are single tape entries so that the stored activations stay small.

mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::Activation;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Mini-batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divisor `B - 1`, or the biased value when `B == 1`).
    pub var: Vec<T>,
}

/// Row-stochastic attention weights laid out `[batch, heads, tokens, tokens]`.
pub struct AttentionMap<'a, T> {
    pub probs: &'a [T],
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Act {
        a: Var,
        f: Activation,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        a: Var,
        mask: Vec<u8>,
        scale: T,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    PoolMaxMean {
        a: Var,
        argmax: Vec<u32>,
    },
    Reshape {
        a: Var,
    },
    /// Scalar output whose input gradients were computed during the forward.
    Custom {
        inputs: Vec<(Var, Vec<T>)>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradient-tracking leaves receive `grad` on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Attention probability blocks recorded on this tape.
    pub fn attention_maps(&self) -> Vec<AttentionMap<'_, T>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, heads, .. } => Some(AttentionMap {
                    probs,
                    batch: n.value.shape()[0],
                    heads: *heads,
                    tokens: n.value.shape()[1],
                }),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "loss is detached: no gradient-tracking leaf reaches it",
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            ops::backward_node(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

/// Gradient accumulator handed to per-op backward rules.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> GradSink<'a, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}
