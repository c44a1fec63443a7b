//! The composite segmentation loss: softmax cross-entropy, mean squared
//! error and soft intersection-over-union between one-hot labels and the
//! predicted softmax probabilities, combined as an equal-weighted sum
//! `l_tot = l_ce + l_mse + l_iou` (literal unit coefficients).
//!
//! Each term returns its value together with the gradient w.r.t. its stated
//! input; [`total_loss`] chains the MSE and IoU gradients back through the
//! softmax and returns the combined gradient w.r.t. the logits.

use crate::error::{Error, Result};
use crate::ops::{softmax_channel, softmax_channel_backward};
use crate::tensor::{Element, Tensor};

pub const SOFT_IOU_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub mse: f64,
    pub iou: f64,
    pub total: f64,
}

fn check_pair<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<[usize; 4]> {
    let dims = a.dims4()?;
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "prediction shape {:?} does not match labels {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dims)
}

fn check_one_hot<E: Element>(labels: &Tensor<E>) -> Result<()> {
    let [n, c, h, w] = labels.dims4()?;
    let plane = h * w;
    let ld = labels.data();
    for ni in 0..n {
        let base = ni * c * plane;
        for i in 0..plane {
            let mut s = 0.0f64;
            for ci in 0..c {
                s += ld[base + ci * plane + i].to_f64();
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "labels are not one-hot: voxel (n {ni}, flat {i}) sums to {s}"
                )));
            }
        }
    }
    Ok(())
}

/// Mean over voxels of `-sum_c y_c log softmax(logits)_c`, computed through
/// a max-subtracted log-softmax. Gradient w.r.t. the logits is
/// `(p - y) / (N*H*W)`.
pub fn cross_entropy_loss<E: Element>(
    logits: &Tensor<E>,
    labels_onehot: &Tensor<E>,
) -> Result<(f64, Tensor<E>)> {
    let [n, c, h, w] = check_pair(logits, labels_onehot)?;
    check_one_hot(labels_onehot)?;
    let plane = h * w;
    let voxels = (n * plane) as f64;
    let xd = logits.data();
    let yd = labels_onehot.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    for ni in 0..n {
        let base = ni * c * plane;
        for i in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xd[base + ci * plane + i].to_f64());
            }
            let mut z = 0.0f64;
            for ci in 0..c {
                z += (xd[base + ci * plane + i].to_f64() - mx).exp();
            }
            let log_z = z.ln();
            for ci in 0..c {
                let off = base + ci * plane + i;
                let logp = xd[off].to_f64() - mx - log_z;
                let p = logp.exp();
                let y = yd[off].to_f64();
                loss -= y * logp;
                gd[off] = E::from_f64((p - y) / voxels);
            }
        }
    }
    Ok((loss / voxels, grad))
}

/// Mean over all entries of `(p - y)^2`; gradient `2(p - y) / count`.
pub fn mse_loss<E: Element>(probs: &Tensor<E>, labels_onehot: &Tensor<E>) -> Result<(f64, Tensor<E>)> {
    check_pair(probs, labels_onehot)?;
    let count = probs.numel() as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    for (i, (&p, &y)) in probs.data().iter().zip(labels_onehot.data()).enumerate() {
        let d = p.to_f64() - y.to_f64();
        loss += d * d;
        gd[i] = E::from_f64(2.0 * d / count);
    }
    Ok((loss / count, grad))
}

/// Soft IoU loss: per class `I_c = sum p*y`, `U_c = sum (p + y - p*y)`,
/// `loss = 1 - mean_c (I_c + eps) / (U_c + eps)`.
pub fn soft_iou_loss<E: Element>(
    probs: &Tensor<E>,
    labels_onehot: &Tensor<E>,
    eps: f64,
) -> Result<(f64, Tensor<E>)> {
    let [n, c, h, w] = check_pair(probs, labels_onehot)?;
    let plane = h * w;
    let pd = probs.data();
    let yd = labels_onehot.data();

    let mut inter = vec![0.0f64; c];
    let mut union = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                let p = pd[off + i].to_f64();
                let y = yd[off + i].to_f64();
                inter[ci] += p * y;
                union[ci] += p + y - p * y;
            }
        }
    }
    let mut loss = 1.0f64;
    for ci in 0..c {
        loss -= (inter[ci] + eps) / (union[ci] + eps) / c as f64;
    }

    // d/dp of -(1/C)(I+eps)/(U+eps): dI/dp = y, dU/dp = 1 - y.
    let mut grad = Tensor::zeros(probs.shape());
    let gd = grad.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let iu = inter[ci] + eps;
            let uu = union[ci] + eps;
            for i in 0..plane {
                let y = yd[off + i].to_f64();
                let d = (y * uu - iu * (1.0 - y)) / (uu * uu);
                gd[off + i] = E::from_f64(-d / c as f64);
            }
        }
    }
    Ok((loss, grad))
}

/// Equal-weighted total loss with its gradient w.r.t. the logits. The MSE and
/// IoU gradients are chained through the softmax.
pub fn total_loss<E: Element>(
    logits: &Tensor<E>,
    labels_onehot: &Tensor<E>,
) -> Result<(LossTerms, Tensor<E>)> {
    let probs = softmax_channel(logits)?;
    let (ce, grad_ce) = cross_entropy_loss(logits, labels_onehot)?;
    let (mse, grad_mse) = mse_loss(&probs, labels_onehot)?;
    let (iou, grad_iou) = soft_iou_loss(&probs, labels_onehot, SOFT_IOU_EPS)?;
    let grad_probs = grad_mse.add(&grad_iou)?;
    let grad = grad_ce.add(&softmax_channel_backward(&probs, &grad_probs)?)?;
    let terms = LossTerms {
        ce,
        mse,
        iou,
        total: ce + mse + iou,
    };
    if !terms.total.is_finite() {
        return Err(Error::integrity(format!("non-finite loss: {terms:?}")));
    }
    Ok((terms, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot_1vox(c: usize, hot: usize) -> Tensor<f64> {
        let mut v = vec![0.0; c];
        v[hot] = 1.0;
        Tensor::from_f64_slice(&[1, c, 1, 1], &v).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 5] {
            let logits = Tensor::<f64>::zeros(&[1, c, 2, 2]);
            let mut labels = Tensor::<f64>::zeros(&[1, c, 2, 2]);
            for i in 0..4 {
                labels.data_mut()[i] = 1.0; // class 0 everywhere
            }
            let (ce, _) = cross_entropy_loss(&logits, &labels).unwrap();
            assert!((ce - (c as f64).ln()).abs() < 1e-12, "c={c}: {ce}");
        }
    }

    #[test]
    fn ce_closed_form_two_class_voxel() {
        let logits = Tensor::from_f64_slice(&[1, 2, 1, 1], &[2.0_f64.ln(), 0.0]).unwrap();
        let labels = onehot_1vox(2, 0);
        let (ce, _) = cross_entropy_loss(&logits, &labels).unwrap();
        assert!((ce - (-(2.0 / 3.0_f64).ln())).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn ce_vanishes_at_saturating_margin() {
        let logits = Tensor::from_f64_slice(&[1, 2, 1, 1], &[40.0, 0.0]).unwrap();
        let labels = onehot_1vox(2, 0);
        let (ce, _) = cross_entropy_loss(&logits, &labels).unwrap();
        assert!(ce >= 0.0 && ce < 1e-6, "{ce}");
    }

    #[test]
    fn ce_rejects_non_one_hot_rows() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let labels = Tensor::from_f64_slice(&[1, 2, 1, 1], &[0.5, 0.2]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &labels),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mse_uniform_vs_one_hot_is_quarter() {
        let probs = Tensor::from_f64_slice(&[1, 2, 1, 1], &[0.5, 0.5]).unwrap();
        let labels = onehot_1vox(2, 0);
        let (mse, _) = mse_loss(&probs, &labels).unwrap();
        assert!((mse - 0.25).abs() < 1e-15);
        let (zero, _) = mse_loss(&labels, &labels).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn soft_iou_perfect_and_disjoint_extremes() {
        let y = Tensor::from_f64_slice(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let (perfect, _) = soft_iou_loss(&y, &y, SOFT_IOU_EPS).unwrap();
        assert!(perfect.abs() < 1e-9, "{perfect}");

        let flipped = Tensor::from_f64_slice(&[1, 2, 1, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let (disjoint, _) = soft_iou_loss(&flipped, &y, SOFT_IOU_EPS).unwrap();
        assert!(disjoint > 1.0 - 1e-5, "{disjoint}");
    }

    #[test]
    fn soft_iou_half_probability_hand_case() {
        // p = 0.5 at 4 voxels, y = [1,1,0,0], single class:
        // I = 1, U = 1 + 1 + 0.5 + 0.5 = 3 -> loss = 1 - 1/3 = 2/3.
        let p = Tensor::from_f64_slice(&[1, 1, 1, 4], &[0.5; 4]).unwrap();
        let y = Tensor::from_f64_slice(&[1, 1, 1, 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let (iou, _) = soft_iou_loss(&p, &y, SOFT_IOU_EPS).unwrap();
        assert!((iou - 2.0 / 3.0).abs() < 1e-6, "{iou}");
    }

    #[test]
    fn total_is_the_plain_sum_of_terms() {
        let logits = Tensor::from_f64_slice(&[1, 2, 1, 2], &[0.3, -0.7, 1.1, 0.4]).unwrap();
        let labels = Tensor::from_f64_slice(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let (terms, _) = total_loss(&logits, &labels).unwrap();
        assert_eq!(terms.total, terms.ce + terms.mse + terms.iou);
    }

    #[test]
    fn perfect_prediction_limit_drives_total_to_zero() {
        let logits = Tensor::from_f64_slice(&[1, 2, 1, 2], &[50.0, -50.0, -50.0, 50.0]).unwrap();
        let labels = Tensor::from_f64_slice(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let (terms, _) = total_loss(&logits, &labels).unwrap();
        assert!(terms.total < 1e-6, "{terms:?}");
    }
}
