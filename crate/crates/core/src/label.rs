//! Integer label maps (2-d slices). Label volumes are handled through
//! [`crate::io::Volume`]; this type is the per-slice unit the network and the
//! augmentation pipeline consume.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSlice {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelSlice {
    pub fn zeros(h: usize, w: usize) -> Self {
        LabelSlice {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::validation(format!(
                "label slice {h}x{w} implies {} voxels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(LabelSlice { h, w, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.w + c] = v;
    }
}

/// One-hot encode a label slice into a `[num_classes, H, W]` tensor.
/// Every voxel must carry a label `< num_classes`.
pub fn one_hot<E: Element>(labels: &LabelSlice, num_classes: usize) -> Result<Tensor<E>> {
    let (h, w) = (labels.h, labels.w);
    let mut out = Tensor::zeros(&[num_classes, h, w]);
    let plane = h * w;
    let data = out.data_mut();
    for (i, &v) in labels.data.iter().enumerate() {
        let c = v as usize;
        if c >= num_classes {
            return Err(Error::validation(format!(
                "label {} at voxel (row {}, col {}) is out of range for {} classes",
                v,
                i / w,
                i % w,
                num_classes
            )));
        }
        data[c * plane + i] = E::ONE;
    }
    Ok(out)
}

/// Argmax over the class axis of a `[C, H, W]` tensor; ties resolve to the
/// lowest class index. Inverse of [`one_hot`] on exact one-hot input.
pub fn argmax_channels<E: Element>(probs: &Tensor<E>) -> Result<LabelSlice> {
    let shape = probs.shape();
    let (c, h, w) = match shape {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::config(format!(
                "argmax expects [C,H,W], got {s:?}"
            )))
        }
    };
    let plane = h * w;
    let data = probs.data();
    let mut out = LabelSlice::zeros(h, w);
    for i in 0..plane {
        let mut best = 0usize;
        let mut best_v = data[i].to_f64();
        for k in 1..c {
            let v = data[k * plane + i].to_f64();
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        out.data[i] = best as u8;
    }
    Ok(out)
}
