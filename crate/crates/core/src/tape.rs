//! Tape-based reverse-mode automatic differentiation.
//!
//! A forward pass records one [`OpNode`] per operation; [`Tape::backward`]
//! replays the tape in reverse, accumulating gradients by summation whenever a
//! value feeds several consumers. Leaves registered with a name (the model
//! parameters) can be collected into a [`Gradients`] map afterwards.
//!
//! Values are owned by the tape and immutable once recorded; shapes are fixed
//! within one tape.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Recorded operation; inputs are tape value ids, the saved context is
/// whatever the backward pass needs beyond the stored forward values.
#[derive(Debug, Clone)]
pub enum OpKind {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        stats: ops::BnStats,
        train: bool,
    },
    Relu {
        x: ValueId,
    },
    SoftmaxChannel {
        x: ValueId,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
        ca: usize,
        cb: usize,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    MaxPool2 {
        x: ValueId,
        argmax: Vec<u32>,
    },
}

pub struct OpNode<E: Element> {
    pub kind: OpKind,
    pub value: Tensor<E>,
    pub name: Option<String>,
}

pub struct Tape<E: Element> {
    nodes: Vec<OpNode<E>>,
}

/// Gradients keyed by parameter name, in leaf registration order.
#[derive(Debug, Clone)]
pub struct Gradients<E: Element> {
    map: IndexMap<String, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn from_map(map: IndexMap<String, Tensor<E>>) -> Self {
        Gradients { map }
    }
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.map.get(name)
    }
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }
    pub fn len(&self) -> usize {
        self.map.len()
    }
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, kind: OpKind, value: Tensor<E>, name: Option<String>) -> ValueId {
        debug_assert!(
            value.all_finite(),
            "non-finite values produced by {:?}",
            kind_tag(&kind)
        );
        self.nodes.push(OpNode { kind, value, name });
        ValueId(self.nodes.len() - 1)
    }

    /// Unnamed leaf (network input, fixed targets).
    pub fn leaf(&mut self, value: Tensor<E>) -> ValueId {
        self.push(OpKind::Leaf, value, None)
    }

    /// Named leaf; its gradient is reported under `name`.
    pub fn param_leaf(&mut self, name: impl Into<String>, value: Tensor<E>) -> ValueId {
        self.push(OpKind::Leaf, value, Some(name.into()))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(OpKind::Conv2d { x, w, b, stride, pad }, out, None))
    }

    pub fn conv_transpose2d(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::conv_transpose2d_s2(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(OpKind::ConvTranspose2d { x, w, b }, out, None))
    }

    /// Training-mode batchnorm; updates the caller's running statistics in
    /// place with the batch statistics it records for backward.
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        momentum: f64,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
    ) -> Result<ValueId> {
        let (out, stats) =
            ops::batchnorm2d_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        ops::update_running_stats(running_mean, running_var, &stats, momentum);
        Ok(self.push(
            OpKind::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                train: true,
            },
            out,
            None,
        ))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
    ) -> Result<ValueId> {
        let (out, stats) = ops::batchnorm2d_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            OpKind::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                train: false,
            },
            out,
            None,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = ops::relu(self.value(x));
        self.push(OpKind::Relu { x }, out, None)
    }

    pub fn softmax_channel(&mut self, x: ValueId) -> Result<ValueId> {
        let out = ops::softmax_channel(self.value(x))?;
        Ok(self.push(OpKind::SoftmaxChannel { x }, out, None))
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        Ok(self.push(OpKind::ConcatChannels { a, b, ca, cb }, out, None))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add { a, b }, out, None))
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (out, argmax) = ops::maxpool2(self.value(x))?;
        Ok(self.push(OpKind::MaxPool2 { x, argmax }, out, None))
    }

    /// Reverse accumulation from `root`, seeded with `seed` (the loss gradient
    /// w.r.t. the root value). Returns one gradient slot per tape value.
    pub fn backward_full(&self, root: ValueId, seed: Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        if !seed.same_shape(self.value(root)) {
            return Err(Error::integrity(format!(
                "backward seed shape {:?} does not match root value {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                OpKind::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                OpKind::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                OpKind::ConvTranspose2d { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv_transpose2d_s2_backward(self.value(*x), self.value(*w), &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                OpKind::BatchNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                    train,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(
                        self.value(*x),
                        self.value(*gamma),
                        stats,
                        *train,
                        &dy,
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                OpKind::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &dy);
                    accumulate(&mut grads, *x, dx)?;
                }
                OpKind::SoftmaxChannel { x } => {
                    let dx = ops::softmax_channel_backward(&node.value, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                OpKind::ConcatChannels { a, b, ca, cb } => {
                    let (da, db) = ops::concat_channels_backward(*ca, *cb, &dy)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                OpKind::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy)?;
                }
                OpKind::MaxPool2 { x, argmax } => {
                    let dx = ops::maxpool2_backward(self.value(*x).shape(), argmax, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                }
            }
        }
        Ok(grads)
    }

    /// Backward pass returning gradients for every named leaf. Named leaves
    /// the root does not depend on receive zeros of their own shape.
    pub fn backward(&self, root: ValueId, seed: Tensor<E>) -> Result<Gradients<E>> {
        let mut full = self.backward_full(root, seed)?;
        let mut map = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = full[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.same_shape(&node.value) {
                    return Err(Error::integrity(format!(
                        "gradient shape {:?} does not match parameter '{name}' {:?}",
                        g.shape(),
                        node.value.shape()
                    )));
                }
                map.insert(name.clone(), g);
            }
        }
        Ok(Gradients { map })
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Tensor<E>>],
    id: ValueId,
    g: Tensor<E>,
) -> Result<()> {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(g),
        Some(existing) => *existing = existing.add(&g)?,
    }
    Ok(())
}

fn kind_tag(kind: &OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Conv2d { .. } => "conv2d",
        OpKind::ConvTranspose2d { .. } => "conv_transpose2d",
        OpKind::BatchNorm { .. } => "batchnorm2d",
        OpKind::Relu { .. } => "relu",
        OpKind::SoftmaxChannel { .. } => "softmax_channel",
        OpKind::ConcatChannels { .. } => "concat_channels",
        OpKind::Add { .. } => "add_elementwise",
        OpKind::MaxPool2 { .. } => "maxpool2",
    }
}
