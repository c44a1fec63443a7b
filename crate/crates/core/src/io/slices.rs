//! Slice extraction and reversible padding.
//!
//! Volumes are cut along one axis (default: the coarsest-spacing axis, which
//! matches multi-slice acquisition geometry); modalities stack as channels.
//! Each slice is min-max normalized to [0,1] per modality, then zero-padded
//! symmetrically (left-biased remainder) to the next multiple of the network
//! divisor. The pad record makes the operation reversible.

use crate::error::{Error, Result};
use crate::label::LabelSlice;
use crate::tensor::{Element, Tensor};

use super::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    /// Rows/cols added before the content (the smaller share).
    pub before: [usize; 2],
    pub after: [usize; 2],
    pub original: [usize; 2],
}

impl PadRecord {
    pub fn padded(&self) -> [usize; 2] {
        [
            self.original[0] + self.before[0] + self.after[0],
            self.original[1] + self.before[1] + self.after[1],
        ]
    }
}

/// Symmetric left-biased split of the remainder to the next multiple.
pub fn pad_amounts(extent: usize, divisor: usize) -> (usize, usize) {
    let rem = (divisor - extent % divisor) % divisor;
    (rem / 2, rem - rem / 2)
}

#[derive(Debug, Clone)]
pub struct SliceItem<E: Element> {
    /// `[C, H, W]`, padded and normalized.
    pub image: Tensor<E>,
    /// Padded label slice (zeros when no label volume was supplied).
    pub label: LabelSlice,
    pub subject: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct SliceDataset<E: Element> {
    pub items: Vec<SliceItem<E>>,
    pub pad: PadRecord,
    pub axis: usize,
    pub channels: usize,
}

impl<E: Element> SliceDataset<E> {
    pub fn slice_hw(&self) -> [usize; 2] {
        self.pad.padded()
    }

    /// Concatenate datasets with identical slice geometry.
    pub fn merge(datasets: Vec<SliceDataset<E>>) -> Result<SliceDataset<E>> {
        let mut iter = datasets.into_iter();
        let mut first = iter
            .next()
            .ok_or_else(|| Error::validation("cannot merge zero datasets".to_string()))?;
        for d in iter {
            if d.pad != first.pad || d.axis != first.axis || d.channels != first.channels {
                return Err(Error::validation(
                    "datasets with different slice geometry cannot be merged".to_string(),
                ));
            }
            first.items.extend(d.items);
        }
        Ok(first)
    }
}

/// Axis with the coarsest spacing (ties resolve to the last axis, the usual
/// slice direction).
pub fn coarsest_axis(spacing: &[f32; 3]) -> usize {
    let mut best = 0;
    for a in 1..3 {
        if spacing[a] >= spacing[best] {
            best = a;
        }
    }
    best
}

fn grid_dims(dims: &[usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        2 => (dims[0], dims[1]),
        _ => unreachable!(),
    }
}

#[inline]
fn voxel_of(dims: &[usize; 3], axis: usize, k: usize, r: usize, c: usize) -> (usize, usize, usize) {
    match axis {
        0 => (k, r, c),
        1 => (r, k, c),
        2 => (r, c, k),
        _ => unreachable!(),
    }
}

/// Cut aligned volumes into network-ready slices. `images` holds one volume
/// per modality; `labels` is optional (prediction has none).
pub fn extract_slices<E: Element>(
    images: &[Volume],
    labels: Option<&Volume>,
    axis: Option<usize>,
    target_divisor: usize,
) -> Result<SliceDataset<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("at least one image modality is required".to_string()))?;
    for img in images {
        if img.dims != first.dims {
            return Err(Error::validation(format!(
                "modality '{}' dims {:?} do not match '{}' dims {:?}",
                img.modality, img.dims, first.modality, first.dims
            )));
        }
    }
    if let Some(lbl) = labels {
        if lbl.dims != first.dims {
            return Err(Error::validation(format!(
                "label dims {:?} do not match image dims {:?}",
                lbl.dims, first.dims
            )));
        }
    }
    let axis = match axis {
        Some(a) if a < 3 => a,
        Some(a) => return Err(Error::validation(format!("slice axis must be 0..3, got {a}"))),
        None => coarsest_axis(&first.spacing),
    };
    let divisor = target_divisor.max(1);
    let (h, w) = grid_dims(&first.dims, axis);
    let (pad_h, pad_w) = (pad_amounts(h, divisor), pad_amounts(w, divisor));
    let pad = PadRecord {
        before: [pad_h.0, pad_w.0],
        after: [pad_h.1, pad_w.1],
        original: [h, w],
    };
    let [ph, pw] = pad.padded();
    let channels = images.len();
    let n_slices = first.dims[axis];

    let label_voxels = labels.map(|l| l.as_labels()).transpose()?;

    let mut items = Vec::with_capacity(n_slices);
    for k in 0..n_slices {
        let mut image = Tensor::zeros(&[channels, ph, pw]);
        for (ci, img) in images.iter().enumerate() {
            // Per-slice, per-modality min-max normalization to [0,1].
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for r in 0..h {
                for c in 0..w {
                    let (x, y, z) = voxel_of(&img.dims, axis, k, r, c);
                    let v = img.at(x, y, z);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let scale = if hi > lo { 1.0 / (hi - lo) as f64 } else { 0.0 };
            let dst = &mut image.data_mut()[ci * ph * pw..][..ph * pw];
            for r in 0..h {
                for c in 0..w {
                    let (x, y, z) = voxel_of(&img.dims, axis, k, r, c);
                    let v = (img.at(x, y, z) - lo) as f64 * scale;
                    dst[(r + pad.before[0]) * pw + c + pad.before[1]] = E::from_f64(v);
                }
            }
        }
        let mut label = LabelSlice::zeros(ph, pw);
        if let Some(lv) = &label_voxels {
            let dims = &labels.unwrap().dims;
            for r in 0..h {
                for c in 0..w {
                    let (x, y, z) = voxel_of(dims, axis, k, r, c);
                    label.data[(r + pad.before[0]) * pw + c + pad.before[1]] =
                        lv[x + dims[0] * (y + dims[1] * z)];
                }
            }
        }
        items.push(SliceItem {
            image,
            label,
            subject: first.subject_id.clone(),
            index: k,
        });
    }
    Ok(SliceDataset {
        items,
        pad,
        axis,
        channels,
    })
}

/// Crop one padded slice back to its original extent.
pub fn unpad_labels(slice: &LabelSlice, pad: &PadRecord) -> LabelSlice {
    let [h, w] = pad.original;
    let mut out = LabelSlice::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.data[r * w + c] = slice.at(r + pad.before[0], c + pad.before[1]);
        }
    }
    out
}

/// Stack predicted label slices back into a volume with the template's dims
/// and spacing (inverse of [`extract_slices`] on the label path).
pub fn reassemble_labels(
    slices: &[LabelSlice],
    pad: &PadRecord,
    axis: usize,
    template: &Volume,
) -> Result<Volume> {
    if slices.len() != template.dims[axis] {
        return Err(Error::validation(format!(
            "{} slices cannot rebuild a volume with {} along axis {axis}",
            slices.len(),
            template.dims[axis]
        )));
    }
    let dims = template.dims;
    let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    let (h, w) = grid_dims(&dims, axis);
    if pad.original != [h, w] {
        return Err(Error::validation(format!(
            "pad record {:?} does not match template grid {h}x{w}",
            pad.original
        )));
    }
    for (k, slice) in slices.iter().enumerate() {
        let cropped = unpad_labels(slice, pad);
        for r in 0..h {
            for c in 0..w {
                let (x, y, z) = voxel_of(&dims, axis, k, r, c);
                data[x + dims[0] * (y + dims[1] * z)] = cropped.at(r, c) as f32;
            }
        }
    }
    let mut vol = Volume::new(dims, template.spacing, data)?;
    vol.subject_id = template.subject_id.clone();
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: [usize; 3], spacing: [f32; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|v| v as f32).collect();
        let mut vol = Volume::new(dims, spacing, data).unwrap();
        vol.subject_id = "s0".to_string();
        vol
    }

    #[test]
    fn divisible_dims_need_no_padding() {
        let img = ramp_volume([64, 64, 10], [1.0, 1.0, 3.0]);
        let ds: SliceDataset<f32> = extract_slices(&[img], None, None, 8).unwrap();
        assert_eq!(ds.axis, 2, "coarsest spacing axis");
        assert_eq!(ds.items.len(), 10);
        assert_eq!(ds.slice_hw(), [64, 64]);
        assert_eq!(ds.pad.before, [0, 0]);
        assert_eq!(ds.pad.after, [0, 0]);
    }

    #[test]
    fn odd_dims_pad_left_biased() {
        let img = ramp_volume([61, 61, 2], [1.0, 1.0, 5.0]);
        let ds: SliceDataset<f32> = extract_slices(&[img], None, Some(2), 8).unwrap();
        assert_eq!(ds.pad.before, [1, 1]);
        assert_eq!(ds.pad.after, [2, 2]);
        assert_eq!(ds.slice_hw(), [64, 64]);
    }

    #[test]
    fn unpad_inverts_pad_for_random_dims() {
        for (h, w) in [(61, 61), (33, 47), (64, 64), (1, 9)] {
            let (bh, ah) = pad_amounts(h, 8);
            let (bw, aw) = pad_amounts(w, 8);
            let pad = PadRecord {
                before: [bh, bw],
                after: [ah, aw],
                original: [h, w],
            };
            let mut original = LabelSlice::zeros(h, w);
            for (i, v) in original.data.iter_mut().enumerate() {
                *v = (i % 7) as u8;
            }
            let [ph, pw] = pad.padded();
            let mut padded = LabelSlice::zeros(ph, pw);
            for r in 0..h {
                for c in 0..w {
                    padded.set(r + bh, c + bw, original.at(r, c));
                }
            }
            assert_eq!(unpad_labels(&padded, &pad), original);
        }
    }

    #[test]
    fn slices_reassemble_to_original_dims_and_values() {
        let img = ramp_volume([13, 9, 4], [1.0, 1.0, 4.0]);
        let labels = {
            let data: Vec<f32> = (0..13 * 9 * 4).map(|v| (v % 3) as f32).collect();
            let mut l = Volume::new([13, 9, 4], [1.0, 1.0, 4.0], data).unwrap();
            l.subject_id = "s0".into();
            l
        };
        let ds: SliceDataset<f32> = extract_slices(&[img.clone()], Some(&labels), Some(2), 8).unwrap();
        let label_slices: Vec<LabelSlice> = ds.items.iter().map(|i| i.label.clone()).collect();
        let back = reassemble_labels(&label_slices, &ds.pad, ds.axis, &img).unwrap();
        assert_eq!(back.dims, labels.dims);
        assert_eq!(back.data, labels.data);
    }

    #[test]
    fn normalization_maps_each_slice_to_unit_range() {
        let img = ramp_volume([8, 8, 3], [1.0, 1.0, 2.0]);
        let ds: SliceDataset<f64> = extract_slices(&[img], None, Some(2), 8).unwrap();
        for item in &ds.items {
            let lo = item.image.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = item.image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lo, 0.0);
            assert!((hi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_modalities_are_rejected() {
        let a = ramp_volume([8, 8, 2], [1.0; 3]);
        let b = ramp_volume([8, 9, 2], [1.0; 3]);
        assert!(extract_slices::<f32>(&[a, b], None, Some(2), 8).is_err());
    }
}
