//! From-scratch CPU toolkit for the DeepMRSeg MRI segmentation network and
//! its UNet baseline: dense tensors with tape-based reverse-mode autodiff,
//! the composite segmentation loss, Adam with per-epoch exponential decay,
//! slice augmentation, overlap metrics with repeated k-fold evaluation, and
//! a minimal NIfTI-1 reader/writer with checkpointing.

pub mod augment;
pub mod crossval;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
