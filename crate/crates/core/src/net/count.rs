//! Exact learnable-parameter counting, derived purely from shapes.
//! Counts include convolution weights and biases and batchnorm gamma/beta;
//! running statistics are excluded.

use super::layers::{enumerate_layers, LayerSpec};
use super::{ArchKind, NetworkConfig};

pub fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

pub fn bn_param_count(c: usize) -> usize {
    2 * c
}

/// Two 3x3 convs at `c` channels with their batchnorms.
/// c = 16: 2*(9*16*16 + 16) + 2*(2*16) = 4704.
pub fn resnet_block_param_count(c: usize) -> usize {
    2 * conv_param_count(c, c, 3) + 2 * bn_param_count(c)
}

/// Four 1x1 reductions to c/4, the per-branch 3x3 stacks, the fusing 1x1
/// back to `c`, and every batchnorm.
/// c = 16, depths [0,1,2,3]: 4*(16*4+4) + 6*(9*4*4+4) + (16*16+16)
/// + (4*2*4 + 6*2*4 + 2*16) = 1544.
pub fn resinc_block_param_count(c: usize, branch_depths: &[usize]) -> usize {
    let quarter = c / 4;
    let n_convs3: usize = branch_depths.iter().sum();
    branch_depths.len() * (conv_param_count(c, quarter, 1) + bn_param_count(quarter))
        + n_convs3 * (conv_param_count(quarter, quarter, 3) + bn_param_count(quarter))
        + conv_param_count(c, c, 1)
        + bn_param_count(c)
}

/// Per-block learnable parameter counts for a full network, in forward
/// order. The sum equals the learnable count of an initialized model.
pub fn count_parameters(arch: ArchKind, cfg: &NetworkConfig) -> Vec<(String, usize)> {
    let mut blocks: Vec<(String, usize)> = Vec::new();
    for layer in enumerate_layers(arch, cfg) {
        let block = block_of(arch, layer.name());
        match blocks.last_mut() {
            Some((name, count)) if *name == block => *count += layer.learnable_count(),
            _ => blocks.push((block, layer.learnable_count())),
        }
    }
    blocks
}

/// Map a layer unit name onto its owning block label.
fn block_of(arch: ArchKind, unit: &str) -> String {
    let first = unit.split('.').next().unwrap_or(unit);
    match arch {
        ArchKind::DeepMrSeg => {
            if first == "proj" {
                "projection".to_string()
            } else if first.starts_with("pre") {
                format!("pre_encode.{}", &first[3..])
            } else if first.starts_with("enc") {
                let second = unit.split('.').nth(1).unwrap_or("");
                if second == "down" {
                    format!("encoder{}.transition_down", &first[3..])
                } else {
                    format!("encoder{}.resinc", &first[3..])
                }
            } else if first.starts_with("dec") {
                let second = unit.split('.').nth(1).unwrap_or("");
                if second == "resinc" {
                    format!("decoder{}.resinc", &first[3..])
                } else {
                    format!("decoder{}.transition_up", &first[3..])
                }
            } else {
                "head".to_string()
            }
        }
        ArchKind::Unet => {
            if first.starts_with("enc") {
                format!("encoder{}", &first[3..])
            } else if first == "bottom" {
                "bottleneck".to_string()
            } else if first.starts_with("dec") {
                format!("decoder{}", &first[3..])
            } else {
                "head".to_string()
            }
        }
    }
}
