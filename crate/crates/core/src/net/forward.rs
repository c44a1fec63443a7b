//! Tape-recorded forward passes for both architectures.
//!
//! Block layout (DeepMRSeg):
//! - projection: 1x1 conv m->f, BN, ReLU;
//! - pre-encoding: ResNet blocks at f channels (3x3-BN-ReLU, 3x3-BN,
//!   + identity, ReLU);
//! - encoder level l: transition down (1x1 stride-2 conv c->2c, BN, ReLU)
//!   then a ResInc block;
//! - ResInc: four branches, each 1x1 c->c/4 (BN+ReLU) followed by that
//!   branch's number of 3x3 convs (BN+ReLU each); branch concat (c) passes a
//!   1x1 c->c with BN and no activation, identity is added, final ReLU;
//! - decoder level l: transposed conv c->c/4 (BN+ReLU), concat with the
//!   mirror skip (c/2), fusion 1x1 (3c/4)->c/2 with BN+ReLU, then a ResInc
//!   block at c/2;
//! - head: 1x1 conv f->classes producing logits (softmax is applied by the
//!   loss / prediction consumers).
//!
//! The UNet baseline follows the classic layout with a batchnorm layer
//! between every convolution and its ReLU, 2x2 max reduction for
//! downsampling and a 1x1-stride-2 transposed convolution (channel halving)
//! for upsampling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::label::{argmax_channels, LabelSlice};
use crate::ops;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Element, Tensor};

use super::params::ModelParams;
use super::{ArchKind, Mode, NetworkConfig, BN_EPS, BN_MOMENTUM};

enum ParamsRef<'a, E: Element> {
    Train(&'a mut ModelParams<E>),
    Infer(&'a ModelParams<E>),
}

/// Builder tying a tape to a parameter set for one forward pass. Parameters
/// become named tape leaves on first use and are cached afterwards, so a
/// tensor used twice still accumulates a single gradient.
pub struct NetForward<'a, E: Element> {
    tape: &'a mut Tape<E>,
    params: ParamsRef<'a, E>,
    pub mode: Mode,
    leaves: HashMap<String, ValueId>,
}

impl<'a, E: Element> NetForward<'a, E> {
    /// Training-mode builder; batchnorm updates the running statistics.
    pub fn train(tape: &'a mut Tape<E>, params: &'a mut ModelParams<E>) -> Self {
        NetForward {
            tape,
            params: ParamsRef::Train(params),
            mode: Mode::Train,
            leaves: HashMap::new(),
        }
    }

    /// Inference-mode builder over read-only parameters.
    pub fn infer(tape: &'a mut Tape<E>, params: &'a ModelParams<E>) -> Self {
        NetForward {
            tape,
            params: ParamsRef::Infer(params),
            mode: Mode::Infer,
            leaves: HashMap::new(),
        }
    }

    pub fn new(tape: &'a mut Tape<E>, params: &'a mut ModelParams<E>, mode: Mode) -> Self {
        match mode {
            Mode::Train => Self::train(tape, params),
            Mode::Infer => NetForward {
                tape,
                params: ParamsRef::Train(params),
                mode: Mode::Infer,
                leaves: HashMap::new(),
            },
        }
    }

    pub fn tape(&mut self) -> &mut Tape<E> {
        self.tape
    }

    /// Names of every parameter this forward pass touched.
    pub fn touched_params(&self) -> Vec<String> {
        let mut v: Vec<String> = self.leaves.keys().cloned().collect();
        v.sort();
        v
    }

    fn params(&self) -> &ModelParams<E> {
        match &self.params {
            ParamsRef::Train(p) => p,
            ParamsRef::Infer(p) => p,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let tensor = self.params().get(name)?.clone();
        let id = self.tape.param_leaf(name, tensor);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv(&mut self, x: ValueId, unit: &str, stride: usize, pad: usize) -> Result<ValueId> {
        let w = self.param(&format!("{unit}.w"))?;
        let b = self.param(&format!("{unit}.b"))?;
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn conv_transpose(&mut self, x: ValueId, unit: &str) -> Result<ValueId> {
        let w = self.param(&format!("{unit}.w"))?;
        let b = self.param(&format!("{unit}.b"))?;
        self.tape.conv_transpose2d(x, w, b)
    }

    pub fn bn(&mut self, x: ValueId, unit: &str) -> Result<ValueId> {
        let gamma = self.param(&format!("{unit}.gamma"))?;
        let beta = self.param(&format!("{unit}.beta"))?;
        match (&mut self.params, self.mode) {
            (ParamsRef::Train(p), Mode::Train) => {
                let rs = p.running_mut(unit)?;
                self.tape
                    .batchnorm_train(x, gamma, beta, BN_EPS, BN_MOMENTUM, &mut rs.mean, &mut rs.var)
            }
            (ParamsRef::Train(p), Mode::Infer) => {
                let rs = p.running(unit)?;
                self.tape.batchnorm_infer(x, gamma, beta, BN_EPS, &rs.mean, &rs.var)
            }
            (ParamsRef::Infer(p), _) => {
                let rs = p.running(unit)?;
                self.tape.batchnorm_infer(x, gamma, beta, BN_EPS, &rs.mean, &rs.var)
            }
        }
    }

    /// conv -> BN -> ReLU under a shared unit prefix.
    pub fn conv_bn_relu(&mut self, x: ValueId, unit: &str, stride: usize, pad: usize) -> Result<ValueId> {
        let y = self.conv(x, &format!("{unit}.conv"), stride, pad)?;
        let y = self.bn(y, &format!("{unit}.bn"))?;
        Ok(self.tape.relu(y))
    }
}

/// 1x1 projection of the input modalities onto the base feature maps.
pub fn projection_forward<E: Element>(fx: &mut NetForward<E>, x: ValueId) -> Result<ValueId> {
    fx.conv_bn_relu(x, "proj", 1, 0)
}

/// Standard two-conv residual block; spatial dims preserved (pad 1).
pub fn resnet_block_forward<E: Element>(fx: &mut NetForward<E>, x: ValueId, prefix: &str) -> Result<ValueId> {
    let y = fx.conv_bn_relu(x, &format!("{prefix}.c1"), 1, 1)?;
    let y = fx.conv(y, &format!("{prefix}.c2.conv"), 1, 1)?;
    let y = fx.bn(y, &format!("{prefix}.c2.bn"))?;
    let y = fx.tape.add(y, x)?;
    Ok(fx.tape.relu(y))
}

/// Four-branch residual-inception block. The final 1x1 acts as a linear
/// weighting of the concatenated branches: BN but no activation before the
/// identity add.
pub fn resinc_block_forward<E: Element>(
    fx: &mut NetForward<E>,
    x: ValueId,
    prefix: &str,
    branch_depths: &[usize],
) -> Result<ValueId> {
    let c = fx.tape.value(x).shape()[1];
    if c % 4 != 0 {
        return Err(Error::config(format!(
            "resinc block needs channels divisible by 4, got {c}"
        )));
    }
    let mut branches = Vec::with_capacity(branch_depths.len());
    for (br, &depth) in branch_depths.iter().enumerate() {
        let mut y = fx.conv_bn_relu(x, &format!("{prefix}.b{br}.reduce"), 1, 0)?;
        for j in 0..depth {
            y = fx.conv_bn_relu(y, &format!("{prefix}.b{br}.c{j}"), 1, 1)?;
        }
        branches.push(y);
    }
    let mut cat = branches[0];
    for &b in &branches[1..] {
        cat = fx.tape.concat_channels(cat, b)?;
    }
    let y = fx.conv(cat, &format!("{prefix}.fuse.conv"), 1, 0)?;
    let y = fx.bn(y, &format!("{prefix}.fuse.bn"))?;
    let y = fx.tape.add(y, x)?;
    Ok(fx.tape.relu(y))
}

/// Learned downsampling: 1x1 stride-2 conv doubling the channels, BN, ReLU.
pub fn transition_down<E: Element>(fx: &mut NetForward<E>, x: ValueId, prefix: &str) -> Result<ValueId> {
    let [_, _, h, w] = fx.tape.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "transition down requires even spatial dims, got {h}x{w} (inputs are padded to a multiple of 2^depth)"
        )));
    }
    fx.conv_bn_relu(x, &format!("{prefix}.down"), 2, 0)
}

/// Learned upsampling: transposed conv c->c/4 (BN+ReLU), concat with the
/// mirror skip (c/2 channels at 2H x 2W), fusion 1x1 (3c/4)->c/2 (BN+ReLU).
pub fn transition_up<E: Element>(
    fx: &mut NetForward<E>,
    x: ValueId,
    skip: ValueId,
    prefix: &str,
) -> Result<ValueId> {
    let [n, c, h, w] = fx.tape.value(x).dims4()?;
    if c % 4 != 0 {
        return Err(Error::config(format!(
            "transition up needs channels divisible by 4, got {c}"
        )));
    }
    let skip_shape = fx.tape.value(skip).shape().to_vec();
    let expected = [n, c / 2, 2 * h, 2 * w];
    if skip_shape != expected {
        return Err(Error::config(format!(
            "transition up skip shape {skip_shape:?} does not match expected {expected:?}"
        )));
    }
    let y = fx.conv_transpose(x, &format!("{prefix}.up.convt"))?;
    let y = fx.bn(y, &format!("{prefix}.up.bn"))?;
    let y = fx.tape.relu(y);
    let y = fx.tape.concat_channels(y, skip)?;
    fx.conv_bn_relu(y, &format!("{prefix}.fuse"), 1, 0)
}

fn check_input<E: Element>(tape: &Tape<E>, x: ValueId, cfg: &NetworkConfig) -> Result<()> {
    let [_, c, h, w] = tape.value(x).dims4()?;
    if c != cfg.in_channels {
        return Err(Error::config(format!(
            "input has {c} channels, configuration expects {}",
            cfg.in_channels
        )));
    }
    let d = cfg.spatial_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::config(format!(
            "input {h}x{w} not divisible by 2^depth = {d}"
        )));
    }
    Ok(())
}

/// Full DeepMRSeg forward pass; returns the logits value id.
pub fn deepmrseg_forward<E: Element>(
    fx: &mut NetForward<E>,
    x: ValueId,
    cfg: &NetworkConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    check_input(fx.tape, x, cfg)?;
    let mut cur = projection_forward(fx, x)?;
    for i in 0..cfg.pre_encode_blocks {
        cur = resnet_block_forward(fx, cur, &format!("pre{i}"))?;
    }
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 1..=cfg.depth {
        skips.push(cur);
        cur = transition_down(fx, cur, &format!("enc{l}"))?;
        cur = resinc_block_forward(fx, cur, &format!("enc{l}.resinc"), &cfg.resinc_branch_depths)?;
    }
    for l in (1..=cfg.depth).rev() {
        let skip = skips.pop().expect("one skip per level");
        cur = transition_up(fx, cur, skip, &format!("dec{l}"))?;
        cur = resinc_block_forward(fx, cur, &format!("dec{l}.resinc"), &cfg.resinc_branch_depths)?;
    }
    fx.conv(cur, "head.conv", 1, 0)
}

/// Baseline UNet with batchnorm between every convolution and ReLU.
pub fn unet_forward<E: Element>(fx: &mut NetForward<E>, x: ValueId, cfg: &NetworkConfig) -> Result<ValueId> {
    cfg.validate()?;
    check_input(fx.tape, x, cfg)?;
    let mut cur = x;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        cur = fx.conv_bn_relu(cur, &format!("enc{l}.c1"), 1, 1)?;
        cur = fx.conv_bn_relu(cur, &format!("enc{l}.c2"), 1, 1)?;
        skips.push(cur);
        cur = fx.tape.maxpool2(cur)?;
    }
    cur = fx.conv_bn_relu(cur, "bottom.c1", 1, 1)?;
    cur = fx.conv_bn_relu(cur, "bottom.c2", 1, 1)?;
    for l in (0..cfg.depth).rev() {
        let skip = skips.pop().expect("one skip per level");
        cur = fx.conv_transpose(cur, &format!("dec{l}.up.convt"))?;
        cur = fx.tape.concat_channels(cur, skip)?;
        cur = fx.conv_bn_relu(cur, &format!("dec{l}.c1"), 1, 1)?;
        cur = fx.conv_bn_relu(cur, &format!("dec{l}.c2"), 1, 1)?;
    }
    fx.conv(cur, "head.conv", 1, 0)
}

pub fn network_forward<E: Element>(
    arch: ArchKind,
    fx: &mut NetForward<E>,
    x: ValueId,
    cfg: &NetworkConfig,
) -> Result<ValueId> {
    match arch {
        ArchKind::DeepMrSeg => deepmrseg_forward(fx, x, cfg),
        ArchKind::Unet => unet_forward(fx, x, cfg),
    }
}

/// Predict label slices for a set of image slices (inference mode, softmax +
/// argmax over the class axis). Slices are processed in batches.
pub fn predict_labels<E: Element>(
    arch: ArchKind,
    cfg: &NetworkConfig,
    params: &ModelParams<E>,
    images: &[Tensor<E>],
    batch_size: usize,
) -> Result<Vec<LabelSlice>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let [c, h, w] = match chunk[0].shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::config(format!("predict expects [C,H,W] slices, got {s:?}"))),
        };
        let mut batch = Tensor::zeros(&[chunk.len(), c, h, w]);
        for (i, img) in chunk.iter().enumerate() {
            if img.shape() != chunk[0].shape() {
                return Err(Error::validation("slices in one batch must share a shape".to_string()));
            }
            batch.data_mut()[i * c * h * w..][..c * h * w].copy_from_slice(img.data());
        }
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let mut fx = NetForward::infer(&mut tape, params);
        let logits = network_forward(arch, &mut fx, x, cfg)?;
        let probs = ops::softmax_channel(tape.value(logits))?;
        let plane = cfg.num_classes * h * w;
        for i in 0..chunk.len() {
            let slice = Tensor::from_vec(
                &[cfg.num_classes, h, w],
                probs.data()[i * plane..][..plane].to_vec(),
            )?;
            out.push(argmax_channels(&slice)?);
        }
    }
    Ok(out)
}
