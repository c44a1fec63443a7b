//! Flat enumeration of every parameterized layer of an architecture, in a
//! stable order. Parameter initialization, counting and checkpoint
//! validation all derive from this single walk so their views of the model
//! cannot drift apart.

use super::{ArchKind, NetworkConfig};

/// One parameterized layer. `name` is the unit prefix: a `Conv` stores
/// `{name}.w` / `{name}.b`, a `Bn` stores `{name}.gamma` / `{name}.beta`
/// plus running statistics keyed by `name` itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Kernel `[cout, cin, k, k]`.
    Conv { name: String, cin: usize, cout: usize, k: usize },
    /// Transposed conv kernel `[cin, cout, 1, 1]`.
    ConvT { name: String, cin: usize, cout: usize },
    Bn { name: String, c: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::ConvT { name, .. } | LayerSpec::Bn { name, .. } => name,
        }
    }

    pub fn learnable_count(&self) -> usize {
        match self {
            LayerSpec::Conv { cin, cout, k, .. } => cout * cin * k * k + cout,
            LayerSpec::ConvT { cin, cout, .. } => cin * cout + cout,
            LayerSpec::Bn { c, .. } => 2 * c,
        }
    }
}

fn conv(out: &mut Vec<LayerSpec>, name: String, cin: usize, cout: usize, k: usize) {
    out.push(LayerSpec::Conv { name, cin, cout, k });
}

fn bn(out: &mut Vec<LayerSpec>, name: String, c: usize) {
    out.push(LayerSpec::Bn { name, c });
}

/// conv + bn pair under a shared unit prefix.
fn conv_bn(out: &mut Vec<LayerSpec>, unit: &str, cin: usize, cout: usize, k: usize) {
    conv(out, format!("{unit}.conv"), cin, cout, k);
    bn(out, format!("{unit}.bn"), cout);
}

fn resnet_block(out: &mut Vec<LayerSpec>, prefix: &str, c: usize) {
    conv_bn(out, &format!("{prefix}.c1"), c, c, 3);
    conv_bn(out, &format!("{prefix}.c2"), c, c, 3);
}

fn resinc_block(out: &mut Vec<LayerSpec>, prefix: &str, c: usize, branch_depths: &[usize]) {
    let quarter = c / 4;
    for (br, &depth) in branch_depths.iter().enumerate() {
        conv_bn(out, &format!("{prefix}.b{br}.reduce"), c, quarter, 1);
        for j in 0..depth {
            conv_bn(out, &format!("{prefix}.b{br}.c{j}"), quarter, quarter, 3);
        }
    }
    conv_bn(out, &format!("{prefix}.fuse"), c, c, 1);
}

fn deepmrseg_layers(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let f = cfg.base_features;
    conv_bn(&mut out, "proj", cfg.in_channels, f, 1);
    for i in 0..cfg.pre_encode_blocks {
        resnet_block(&mut out, &format!("pre{i}"), f);
    }
    for l in 1..=cfg.depth {
        let cin = cfg.channels_at_level(l - 1);
        let c = cfg.channels_at_level(l);
        conv_bn(&mut out, &format!("enc{l}.down"), cin, c, 1);
        resinc_block(&mut out, &format!("enc{l}.resinc"), c, &cfg.resinc_branch_depths);
    }
    for l in (1..=cfg.depth).rev() {
        let c = cfg.channels_at_level(l);
        let (half, quarter) = (c / 2, c / 4);
        out.push(LayerSpec::ConvT {
            name: format!("dec{l}.up.convt"),
            cin: c,
            cout: quarter,
        });
        bn(&mut out, format!("dec{l}.up.bn"), quarter);
        // After concat with the mirror skip the channel count is 3c/4; the
        // fusion projection restores the mirror width c/2.
        conv_bn(&mut out, &format!("dec{l}.fuse"), quarter + half, half, 1);
        resinc_block(&mut out, &format!("dec{l}.resinc"), half, &cfg.resinc_branch_depths);
    }
    conv(&mut out, "head.conv".to_string(), f, cfg.num_classes, 1);
    out
}

fn unet_layers(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let f = cfg.base_features;
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.in_channels } else { cfg.channels_at_level(l - 1) };
        let c = cfg.channels_at_level(l);
        conv_bn(&mut out, &format!("enc{l}.c1"), cin, c, 3);
        conv_bn(&mut out, &format!("enc{l}.c2"), c, c, 3);
    }
    let cb = cfg.channels_at_level(cfg.depth);
    conv_bn(&mut out, "bottom.c1", cb / 2, cb, 3);
    conv_bn(&mut out, "bottom.c2", cb, cb, 3);
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels_at_level(l);
        out.push(LayerSpec::ConvT {
            name: format!("dec{l}.up.convt"),
            cin: 2 * c,
            cout: c,
        });
        conv_bn(&mut out, &format!("dec{l}.c1"), 2 * c, c, 3);
        conv_bn(&mut out, &format!("dec{l}.c2"), c, c, 3);
    }
    conv(&mut out, "head.conv".to_string(), f, cfg.num_classes, 1);
    out
}

pub fn enumerate_layers(arch: ArchKind, cfg: &NetworkConfig) -> Vec<LayerSpec> {
    match arch {
        ArchKind::DeepMrSeg => deepmrseg_layers(cfg),
        ArchKind::Unet => unet_layers(cfg),
    }
}
