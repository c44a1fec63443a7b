//! Volume ingestion and serialization: a strict NIfTI-1 subset, slice
//! extraction with reversible padding, model checkpoints, and the synthetic
//! dataset generator.

pub mod checkpoint;
pub mod nifti;
pub mod slices;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use nifti::{read_nifti, write_nifti, NiftiDatatype, NiftiMeta};
pub use slices::{extract_slices, reassemble_labels, PadRecord, SliceDataset, SliceItem};
pub use synth::{generate_synthetic, write_synthetic_dataset, SynthKind, SynthSpec};

/// A scan or label volume in stored voxel order (x fastest). 2-d inputs are
/// represented with a unit z extent. Orientation metadata is recorded but
/// never used to resample; processing happens in stored voxel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// mm per axis; always positive.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
    pub subject_id: String,
    pub modality: String,
    pub meta: Option<NiftiMeta>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if n != data.len() {
            return Err(Error::validation(format!(
                "volume dims {dims:?} imply {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            subject_id: String::new(),
            modality: String::new(),
            meta: None,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Interpret the volume as integer labels; every voxel must hold an
    /// exact integer in 0..=255.
    pub fn as_labels(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() || v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::validation(format!(
                    "volume is not a label map: voxel {i} holds {v}"
                )));
            }
            out.push(v as u8);
        }
        Ok(out)
    }

    /// Distinct non-background labels present, ascending.
    pub fn label_alphabet(&self) -> Result<Vec<u8>> {
        let mut seen = [false; 256];
        for v in self.as_labels()? {
            seen[v as usize] = true;
        }
        Ok((1u16..=255).filter(|&v| seen[v as usize]).map(|v| v as u8).collect())
    }
}

/// One subject's aligned image modalities and label volume.
#[derive(Debug, Clone)]
pub struct SubjectVolumes {
    pub subject: String,
    pub images: Vec<Volume>,
    pub labels: Volume,
}

/// Load `subj*_<modality>.nii` / `subj*_lbl.nii` pairs from a directory, in
/// subject order.
pub fn load_dataset_dir(dir: &Path, modalities: &[String]) -> Result<Vec<SubjectVolumes>> {
    let mut label_files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with("_lbl.nii"))
                .unwrap_or(false)
        })
        .collect();
    label_files.sort();
    if label_files.is_empty() {
        return Err(Error::validation(format!(
            "no '*_lbl.nii' label volumes found in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(label_files.len());
    for lbl_path in label_files {
        let name = lbl_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let subject = name.trim_end_matches("_lbl.nii").to_string();
        let mut labels = read_nifti(&lbl_path)?;
        labels.subject_id = subject.clone();
        let mut images = Vec::with_capacity(modalities.len());
        for modality in modalities {
            let img_path = dir.join(format!("{subject}_{modality}.nii"));
            if !img_path.exists() {
                return Err(Error::validation(format!(
                    "missing image volume {}",
                    img_path.display()
                )));
            }
            let mut img = read_nifti(&img_path)?;
            img.subject_id = subject.clone();
            img.modality = modality.clone();
            images.push(img);
        }
        out.push(SubjectVolumes {
            subject,
            images,
            labels,
        });
    }
    Ok(out)
}
