//! Slice augmentation: randomized left/right flip, then translation, then
//! rotation (one resampling pass), then brightness/contrast on the image
//! only. Images are sampled bilinearly, labels nearest-neighbour, and both
//! receive the identical geometric draw so pairs stay voxel-aligned.
//! Out-of-bounds regions fill with 0 (image) and background label 0.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelSlice;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Max translation as a fraction of each spatial dim.
    pub max_translate_frac: f64,
    pub max_rotate_deg: f64,
    /// Additive brightness range (images are normalized to [0,1]).
    pub brightness_delta: f64,
    /// Multiplicative contrast range about the per-channel mean.
    pub contrast_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_translate_frac: 0.10,
            max_rotate_deg: 15.0,
            brightness_delta: 0.10,
            contrast_range: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: no flip, no geometry, no intensity change.
    pub fn disabled(seed: u64) -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            max_translate_frac: 0.0,
            max_rotate_deg: 0.0,
            brightness_delta: 0.0,
            contrast_range: [1.0, 1.0],
            seed,
        }
    }
}

/// One sampled geometric transform: flip, then translate by (dx, dy) pixels
/// (columns, rows), then rotate about the slice centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomDraw {
    pub flip_lr: bool,
    pub dx: f64,
    pub dy: f64,
    pub rot_deg: f64,
}

impl GeomDraw {
    pub fn identity() -> Self {
        GeomDraw {
            flip_lr: false,
            dx: 0.0,
            dy: 0.0,
            rot_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityDraw {
    pub brightness: f64,
    pub contrast: f64,
}

impl IntensityDraw {
    pub fn identity() -> Self {
        IntensityDraw {
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

fn sym_draw(rng: &mut ChaCha8Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        rng.gen_range(-magnitude..=magnitude)
    } else {
        0.0
    }
}

/// Sample a transform for an HxW slice.
pub fn draw_augment(cfg: &AugmentConfig, rng: &mut ChaCha8Rng, h: usize, w: usize) -> (GeomDraw, IntensityDraw) {
    let flip_lr = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let dx = sym_draw(rng, cfg.max_translate_frac * w as f64);
    let dy = sym_draw(rng, cfg.max_translate_frac * h as f64);
    let rot_deg = sym_draw(rng, cfg.max_rotate_deg);
    let brightness = sym_draw(rng, cfg.brightness_delta);
    let contrast = if cfg.contrast_range[0] < cfg.contrast_range[1] {
        rng.gen_range(cfg.contrast_range[0]..=cfg.contrast_range[1])
    } else {
        cfg.contrast_range[0]
    };
    (
        GeomDraw { flip_lr, dx, dy, rot_deg },
        IntensityDraw { brightness, contrast },
    )
}

/// Source coordinates for an output pixel under the inverse of
/// flip -> translate -> rotate.
#[inline]
fn source_coords(g: &GeomDraw, h: usize, w: usize, r: usize, c: usize) -> (f64, f64) {
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = -g.rot_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // Undo the rotation about the centre.
    let yr = r as f64 - cr;
    let xc = c as f64 - cc;
    let mut src_r = cos * yr - sin * xc + cr;
    let mut src_c = sin * yr + cos * xc + cc;
    // Undo the translation.
    src_r -= g.dy;
    src_c -= g.dx;
    // Undo the flip.
    if g.flip_lr {
        src_c = w as f64 - 1.0 - src_c;
    }
    (src_r, src_c)
}

fn sample_plane(plane: &[f64], h: usize, w: usize, r: f64, c: f64, interp: Interp) -> f64 {
    match interp {
        Interp::Nearest => {
            let ri = r.round();
            let ci = c.round();
            if ri < 0.0 || ci < 0.0 || ri >= h as f64 || ci >= w as f64 {
                0.0
            } else {
                plane[ri as usize * w + ci as usize]
            }
        }
        Interp::Bilinear => {
            let r0 = r.floor();
            let c0 = c.floor();
            let fr = r - r0;
            let fc = c - c0;
            let mut acc = 0.0;
            for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                if wr == 0.0 {
                    continue;
                }
                for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                    if wc == 0.0 {
                        continue;
                    }
                    let rr = r0 + dr;
                    let cc = c0 + dc;
                    let v = if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                        0.0
                    } else {
                        plane[rr as usize * w + cc as usize]
                    };
                    acc += wr * wc * v;
                }
            }
            acc
        }
    }
}

/// Warp a `[C,H,W]` image with one geometric draw; zero fill outside.
pub fn apply_geometric<E: Element>(img: &Tensor<E>, g: &GeomDraw, interp: Interp) -> Result<Tensor<E>> {
    let (ch, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::validation(format!("augment expects [C,H,W] image, got {s:?}"))),
    };
    let mut out = Tensor::zeros(img.shape());
    for k in 0..ch {
        let plane: Vec<f64> = img.data()[k * h * w..][..h * w]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let dst = &mut out.data_mut()[k * h * w..][..h * w];
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = source_coords(g, h, w, r, c);
                dst[r * w + c] = E::from_f64(sample_plane(&plane, h, w, sr, sc, interp));
            }
        }
    }
    Ok(out)
}

/// Warp a label slice with the same draw; nearest-neighbour, background fill.
pub fn apply_geometric_labels(labels: &LabelSlice, g: &GeomDraw) -> LabelSlice {
    let (h, w) = (labels.h, labels.w);
    let mut out = LabelSlice::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = source_coords(g, h, w, r, c);
            let ri = sr.round();
            let ci = sc.round();
            let v = if ri < 0.0 || ci < 0.0 || ri >= h as f64 || ci >= w as f64 {
                0
            } else {
                labels.data[ri as usize * w + ci as usize]
            };
            out.data[r * w + c] = v;
        }
    }
    out
}

/// Brightness shift then contrast scaling about the per-channel mean.
pub fn apply_intensity<E: Element>(img: &Tensor<E>, draw: &IntensityDraw) -> Result<Tensor<E>> {
    let (ch, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::validation(format!("augment expects [C,H,W] image, got {s:?}"))),
    };
    let mut out = img.clone();
    for k in 0..ch {
        let plane = &mut out.data_mut()[k * h * w..][..h * w];
        let mut mean = 0.0f64;
        for v in plane.iter() {
            mean += v.to_f64() + draw.brightness;
        }
        mean /= (h * w) as f64;
        for v in plane.iter_mut() {
            let shifted = v.to_f64() + draw.brightness;
            *v = E::from_f64(mean + draw.contrast * (shifted - mean));
        }
    }
    Ok(out)
}

/// Full augmentation of an (image, label) pair from a seeded stream: shared
/// geometric transform, intensity on the image only.
pub fn augment_pair<E: Element>(
    image: &Tensor<E>,
    labels: &LabelSlice,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, LabelSlice)> {
    let (h, w) = (labels.h, labels.w);
    let (geom, intensity) = draw_augment(cfg, rng, h, w);
    let img = apply_geometric(image, &geom, Interp::Bilinear)?;
    let img = apply_intensity(&img, &intensity)?;
    let lbl = apply_geometric_labels(labels, &geom);
    Ok((img, lbl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn test_image() -> Tensor<f64> {
        let data: Vec<f64> = (0..36).map(|v| v as f64 / 36.0).collect();
        Tensor::from_f64_slice(&[1, 6, 6], &data).unwrap()
    }

    fn test_labels() -> LabelSlice {
        let mut l = LabelSlice::zeros(6, 6);
        l.set(2, 3, 1);
        l.set(4, 1, 2);
        l
    }

    #[test]
    fn disabled_config_is_exact_identity() {
        let img = test_image();
        let lbl = test_labels();
        let cfg = AugmentConfig::disabled(9);
        let mut rng = rng_from(9);
        let (img2, lbl2) = augment_pair(&img, &lbl, &cfg, &mut rng).unwrap();
        assert_eq!(img2, img);
        assert_eq!(lbl2, lbl);
    }

    #[test]
    fn flip_twice_restores_exactly() {
        let img = test_image();
        let lbl = test_labels();
        let flip = GeomDraw {
            flip_lr: true,
            ..GeomDraw::identity()
        };
        let once = apply_geometric(&img, &flip, Interp::Bilinear).unwrap();
        let twice = apply_geometric(&once, &flip, Interp::Bilinear).unwrap();
        assert_eq!(twice, img);
        let l_once = apply_geometric_labels(&lbl, &flip);
        let l_twice = apply_geometric_labels(&l_once, &flip);
        assert_eq!(l_twice, lbl);
        assert_ne!(l_once, lbl);
    }

    #[test]
    fn integer_translation_shifts_pixels_exactly() {
        // +2 columns: the pixel at (r, c) lands at (r, c+2); label follows.
        let mut img = Tensor::<f64>::zeros(&[1, 6, 6]);
        img.set(&[0, 2, 1], 1.0);
        let mut lbl = LabelSlice::zeros(6, 6);
        lbl.set(2, 1, 3);
        let g = GeomDraw {
            dx: 2.0,
            ..GeomDraw::identity()
        };
        let img2 = apply_geometric(&img, &g, Interp::Bilinear).unwrap();
        let lbl2 = apply_geometric_labels(&lbl, &g);
        assert_eq!(img2.at(&[0, 2, 3]), 1.0);
        assert_eq!(img2.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(lbl2.at(2, 3), 3);
        assert_eq!(lbl2.data.iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn label_alphabet_never_grows() {
        let img = test_image();
        let lbl = test_labels();
        let cfg = AugmentConfig {
            seed: 3,
            ..AugmentConfig::default()
        };
        for k in 0..50u64 {
            let mut rng = rng_from(k);
            let (_, out) = augment_pair(&img, &lbl, &cfg, &mut rng).unwrap();
            assert!(out.data.iter().all(|v| [0u8, 1, 2].contains(v)));
        }
    }

    #[test]
    fn geometric_transform_keeps_pairs_aligned() {
        // Warping a label-derived mask as a nearest-sampled image must equal
        // the label path for the same draw.
        let lbl = test_labels();
        let mask: Vec<f64> = lbl.data.iter().map(|&v| v as f64).collect();
        let mask_img = Tensor::<f64>::from_f64_slice(&[1, 6, 6], &mask).unwrap();
        for k in 0..20u64 {
            let mut rng = rng_from(k);
            let (g, _) = draw_augment(&AugmentConfig::default(), &mut rng, 6, 6);
            let warped_mask = apply_geometric(&mask_img, &g, Interp::Nearest).unwrap();
            let warped_lbl = apply_geometric_labels(&lbl, &g);
            for (a, &b) in warped_mask.data().iter().zip(&warped_lbl.data) {
                assert_eq!(*a as u8, b, "draw {g:?}");
            }
        }
    }

    #[test]
    fn same_seed_same_augmentation() {
        let img = test_image();
        let lbl = test_labels();
        let cfg = AugmentConfig::default();
        let (a_img, a_lbl) = augment_pair(&img, &lbl, &cfg, &mut rng_from(11)).unwrap();
        let (b_img, b_lbl) = augment_pair(&img, &lbl, &cfg, &mut rng_from(11)).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_lbl, b_lbl);
    }
}
