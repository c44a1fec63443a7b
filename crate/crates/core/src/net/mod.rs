//! Network architectures: the DeepMRSeg encoder-decoder (projection,
//! pre-encoding ResNet blocks, ResInc encoder/decoder with learned
//! transitions) and the batchnorm UNet baseline, plus parameter
//! initialization and exact parameter counting.

pub mod count;
pub mod forward;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use count::{bn_param_count, conv_param_count, count_parameters, resinc_block_param_count, resnet_block_param_count};
pub use forward::{
    deepmrseg_forward, network_forward, predict_labels, projection_forward, resinc_block_forward,
    resnet_block_forward, transition_down, transition_up, unet_forward, NetForward,
};
pub use params::{init_params, ModelParams, RunningStat};

/// Batchnorm epsilon; reference default, the source description gives none.
pub const BN_EPS: f64 = 1e-5;
/// Batchnorm running-statistics momentum (`r <- (1-m)*r + m*batch`).
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Unet,
    DeepMrSeg,
}

impl ArchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::Unet => "unet",
            ArchKind::DeepMrSeg => "deepmrseg",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ArchKind::Unet),
            "deepmrseg" => Ok(ArchKind::DeepMrSeg),
            other => Err(Error::config(format!(
                "unknown architecture '{other}' (expected 'unet' or 'deepmrseg')"
            ))),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Architecture hyperparameters shared by both networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input channels (modalities), the `m` of the projection layer.
    pub in_channels: usize,
    /// Base feature count `f`; divisible by 4 and at least 8 so the ResInc
    /// branches can reduce to `f/4`.
    pub base_features: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub num_classes: usize,
    /// 3x3-conv count per ResInc branch.
    pub resinc_branch_depths: Vec<usize>,
    /// ResNet blocks between projection and the first transition down.
    pub pre_encode_blocks: usize,
}

impl NetworkConfig {
    pub fn new(in_channels: usize, base_features: usize, depth: usize, num_classes: usize) -> Self {
        NetworkConfig {
            in_channels,
            base_features,
            depth,
            num_classes,
            resinc_branch_depths: vec![0, 1, 2, 3],
            pre_encode_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        if self.base_features < 8 || self.base_features % 4 != 0 {
            return Err(Error::config(format!(
                "base_features must be >= 8 and divisible by 4, got {}",
                self.base_features
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.resinc_branch_depths.len() != 4 {
            return Err(Error::config(format!(
                "resinc_branch_depths must list exactly 4 branches, got {}",
                self.resinc_branch_depths.len()
            )));
        }
        Ok(())
    }

    /// Channel count at encoder level `l` (level 0 is the pre-encoding width).
    pub fn channels_at_level(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// The spatial divisor inputs must be padded to.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        // depth 4 is the realistic-run default; desk-scale tests use 2.
        NetworkConfig::new(1, 16, 4, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_bad_feature_counts() {
        assert!(NetworkConfig::new(1, 6, 2, 2).validate().is_err());
        assert!(NetworkConfig::new(1, 10, 2, 2).validate().is_err());
        assert!(NetworkConfig::new(1, 8, 2, 1).validate().is_err());
        assert!(NetworkConfig::new(1, 8, 0, 2).validate().is_err());
        assert!(NetworkConfig::new(1, 8, 2, 2).validate().is_ok());
    }

    #[test]
    fn channel_progression_doubles_per_level() {
        let cfg = NetworkConfig::new(1, 8, 2, 2);
        assert_eq!(cfg.channels_at_level(0), 8);
        assert_eq!(cfg.channels_at_level(1), 16);
        assert_eq!(cfg.channels_at_level(2), 32);
        assert_eq!(cfg.spatial_divisor(), 4);
    }
}
