//! Deterministic synthetic datasets for desk-scale experiments.
//!
//! Blobs mode paints axis-aligned ellipsoids per foreground class with a
//! class-specific mean intensity — a stand-in for deep-brain ROIs. Lesions
//! mode scatters small bright foci on darker tissue — a stand-in for white
//! matter lesions. Labels are the exact generating masks, so the ground
//! truth is noise-free by construction.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

use super::nifti::{write_nifti, NiftiDatatype};
use super::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Lesions,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "lesions" => Ok(SynthKind::Lesions),
            other => Err(Error::validation(format!(
                "unknown synthetic kind '{other}' (expected 'blobs' or 'lesions')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub kind: SynthKind,
    pub noise_sigma: f32,
    /// Lesion count range (inclusive), lesions mode only.
    pub lesion_count: [usize; 2],
    pub seed: u64,
}

impl SynthSpec {
    pub fn blobs(n_subjects: usize, dims: [usize; 3], num_classes: usize, noise_sigma: f32, seed: u64) -> Self {
        SynthSpec {
            n_subjects,
            dims,
            num_classes,
            kind: SynthKind::Blobs,
            noise_sigma,
            lesion_count: [3, 6],
            seed,
        }
    }

    pub fn lesions(n_subjects: usize, dims: [usize; 3], noise_sigma: f32, seed: u64) -> Self {
        SynthSpec {
            n_subjects,
            dims,
            num_classes: 2,
            kind: SynthKind::Lesions,
            noise_sigma,
            lesion_count: [3, 6],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::validation("n_subjects must be >= 1".to_string()));
        }
        if self.dims[0] < 16 || self.dims[1] < 16 || self.dims[2] == 0 {
            return Err(Error::validation(format!(
                "dims {:?} too small for the requested shapes (need at least 16x16xZ)",
                self.dims
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::validation(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.kind == SynthKind::Lesions && self.num_classes != 2 {
            return Err(Error::validation(
                "lesions mode is binary (num_classes must be 2)".to_string(),
            ));
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return Err(Error::validation(format!(
                "bad lesion count range {:?}",
                self.lesion_count
            )));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let d = [
            (x as f64 - self.center[0]) / self.radii[0],
            (y as f64 - self.center[1]) / self.radii[1],
            (z as f64 - self.center[2]) / self.radii[2],
        ];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
    }

    fn paint(&self, labels: &mut [u8], dims: &[usize; 3], value: u8) {
        let lo = |c: f64, r: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64, r: f64, n: usize| ((c + r).ceil() as usize).min(n.saturating_sub(1));
        for z in lo(self.center[2], self.radii[2])..=hi(self.center[2], self.radii[2], dims[2]) {
            for y in lo(self.center[1], self.radii[1])..=hi(self.center[1], self.radii[1], dims[1]) {
                for x in lo(self.center[0], self.radii[0])..=hi(self.center[0], self.radii[0], dims[0]) {
                    if self.contains(x, y, z) {
                        labels[x + dims[0] * (y + dims[1] * z)] = value;
                    }
                }
            }
        }
    }
}

const BLOB_BACKGROUND: f32 = 0.1;
const LESION_TISSUE: f32 = 0.3;
const LESION_INTENSITY: f32 = 0.9;

/// Mean intensity of a foreground class in blobs mode; spread over
/// [0.45, 0.9] so classes are separable from the 0.1 background.
pub fn blob_class_intensity(class: usize, num_classes: usize) -> f32 {
    if num_classes <= 2 {
        return 0.9;
    }
    0.45 + 0.45 * (class - 1) as f32 / (num_classes - 2) as f32
}

fn draw_blob(rng: &mut ChaCha8Rng, dims: &[usize; 3]) -> Ellipsoid {
    let (x, y, z) = (dims[0] as f64, dims[1] as f64, dims[2] as f64);
    let center = [
        rng.gen_range(0.25 * x..=0.75 * x),
        rng.gen_range(0.25 * y..=0.75 * y),
        rng.gen_range(0.2 * z..=0.8 * z.max(1.0)),
    ];
    let radii = [
        rng.gen_range(0.08 * x..=0.18 * x),
        rng.gen_range(0.08 * y..=0.18 * y),
        (0.25 * z).max(0.6),
    ];
    Ellipsoid { center, radii }
}

fn generate_blobs(spec: &SynthSpec, rng: &mut ChaCha8Rng, labels: &mut [u8]) {
    for class in 1..spec.num_classes {
        let n_blobs = rng.gen_range(1..=3usize);
        for _ in 0..n_blobs {
            draw_blob(rng, &spec.dims).paint(labels, &spec.dims, class as u8);
        }
    }
}

fn generate_lesions(spec: &SynthSpec, rng: &mut ChaCha8Rng, labels: &mut [u8]) -> Result<()> {
    let count = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let (x, y, z) = (spec.dims[0] as f64, spec.dims[1] as f64, spec.dims[2] as f64);
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 500 {
                return Err(Error::validation(format!(
                    "dims {:?} too small to place {count} separated lesions",
                    spec.dims
                )));
            }
            let radii = [
                rng.gen_range(1.5..=4.0),
                rng.gen_range(1.5..=4.0),
                (0.35 * z).clamp(0.6, 2.5),
            ];
            let cand = Ellipsoid {
                center: [
                    rng.gen_range(0.1 * x..=0.9 * x),
                    rng.gen_range(0.1 * y..=0.9 * y),
                    rng.gen_range(0.2 * z..=0.8 * z.max(1.0)),
                ],
                radii,
            };
            // Keep a 2-voxel in-plane gap so components never merge and the
            // connected-component count stays exactly the drawn count.
            let separated = placed.iter().all(|e| {
                let dx = e.center[0] - cand.center[0];
                let dy = e.center[1] - cand.center[1];
                let min_gap = e.radii[0].max(e.radii[1]) + cand.radii[0].max(cand.radii[1]) + 2.0;
                (dx * dx + dy * dy).sqrt() > min_gap
            });
            if separated {
                cand.paint(labels, &spec.dims, 1);
                placed.push(cand);
                break;
            }
        }
    }
    Ok(())
}

/// Generate `(image, label)` volume pairs; a pure function of the spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(Volume, Volume)>> {
    spec.validate()?;
    let n = spec.dims[0] * spec.dims[1] * spec.dims[2];
    let mut out = Vec::with_capacity(spec.n_subjects);
    for subj in 0..spec.n_subjects {
        let mut rng = rng::rng_from(rng::derive2(spec.seed, 0x5e17, subj as u64));
        let mut labels = vec![0u8; n];
        match spec.kind {
            SynthKind::Blobs => generate_blobs(spec, &mut rng, &mut labels),
            SynthKind::Lesions => generate_lesions(spec, &mut rng, &mut labels)?,
        }

        let class_intensity: Vec<f32> = match spec.kind {
            SynthKind::Blobs => std::iter::once(BLOB_BACKGROUND)
                .chain((1..spec.num_classes).map(|c| blob_class_intensity(c, spec.num_classes)))
                .collect(),
            SynthKind::Lesions => vec![LESION_TISSUE, LESION_INTENSITY],
        };
        let noise = Normal::new(0.0f64, spec.noise_sigma.max(0.0) as f64).expect("valid sigma");
        let image: Vec<f32> = labels
            .iter()
            .map(|&l| {
                let base = class_intensity[l as usize];
                if spec.noise_sigma > 0.0 {
                    base + noise.sample(&mut rng) as f32
                } else {
                    base
                }
            })
            .collect();

        let subject = format!("subj{subj:03}");
        let spacing = [1.0, 1.0, 3.0];
        let mut img = Volume::new(spec.dims, spacing, image)?;
        img.subject_id = subject.clone();
        img.modality = "img".to_string();
        let mut lbl = Volume::new(spec.dims, spacing, labels.iter().map(|&v| v as f32).collect())?;
        lbl.subject_id = subject;
        out.push((img, lbl));
    }
    Ok(out)
}

/// Write pairs as `subj{NNN}_img.nii` / `subj{NNN}_lbl.nii`.
pub fn write_synthetic_dataset(dir: &Path, pairs: &[(Volume, Volume)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (img, lbl) in pairs {
        write_nifti(img, &dir.join(format!("{}_img.nii", img.subject_id)), NiftiDatatype::Float32)?;
        write_nifti(lbl, &dir.join(format!("{}_lbl.nii", lbl.subject_id)), NiftiDatatype::Uint8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_a_pure_function_of_the_spec() {
        let spec = SynthSpec::blobs(3, [32, 32, 4], 3, 0.05, 9);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 3);
        for ((ai, al), (bi, bl)) in a.iter().zip(&b) {
            assert_eq!(ai.data, bi.data);
            assert_eq!(al.data, bl.data);
        }
    }

    #[test]
    fn noiseless_blobs_hit_class_means_exactly() {
        let spec = SynthSpec::blobs(2, [24, 24, 3], 3, 0.0, 4);
        for (img, lbl) in generate_synthetic(&spec).unwrap() {
            let labels = lbl.as_labels().unwrap();
            assert!(labels.iter().any(|&l| l > 0), "blobs should appear");
            for (v, &l) in img.data.iter().zip(&labels) {
                let expect = if l == 0 {
                    BLOB_BACKGROUND
                } else {
                    blob_class_intensity(l as usize, 3)
                };
                assert_eq!(*v, expect);
            }
        }
    }

    #[test]
    fn rejects_tiny_dims() {
        let spec = SynthSpec::blobs(1, [8, 8, 1], 2, 0.0, 0);
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn lesion_components_match_the_drawn_count() {
        // 6-connected component count oracle over the 3-d label mask.
        fn component_count(labels: &[u8], dims: [usize; 3]) -> usize {
            let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
            let mut seen = vec![false; labels.len()];
            let mut count = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let i = idx(x, y, z);
                        if labels[i] == 0 || seen[i] {
                            continue;
                        }
                        count += 1;
                        let mut stack = vec![(x, y, z)];
                        seen[i] = true;
                        while let Some((cx, cy, cz)) = stack.pop() {
                            let mut push = |nx: usize, ny: usize, nz: usize| {
                                let j = idx(nx, ny, nz);
                                if labels[j] != 0 && !seen[j] {
                                    seen[j] = true;
                                    stack.push((nx, ny, nz));
                                }
                            };
                            if cx > 0 { push(cx - 1, cy, cz); }
                            if cx + 1 < dims[0] { push(cx + 1, cy, cz); }
                            if cy > 0 { push(cx, cy - 1, cz); }
                            if cy + 1 < dims[1] { push(cx, cy + 1, cz); }
                            if cz > 0 { push(cx, cy, cz - 1); }
                            if cz + 1 < dims[2] { push(cx, cy, cz + 1); }
                        }
                    }
                }
            }
            count
        }

        let spec = SynthSpec::lesions(5, [64, 64, 4], 0.0, 21);
        for (_, lbl) in generate_synthetic(&spec).unwrap() {
            let labels = lbl.as_labels().unwrap();
            let cc = component_count(&labels, lbl.dims);
            assert!((3..=6).contains(&cc), "component count {cc} outside [3,6]");
        }
    }
}
