//! Overlap and agreement metrics: confusion counts with one-vs-rest
//! binarization, F-beta (F1 is the Dice coefficient, F2 weighs recall),
//! balanced accuracy, and the concordance correlation coefficient used on
//! segmented volumes across subjects.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Voxelwise confusion counts for one ROI label (one-vs-rest).
pub fn confusion_counts(pred: &[u8], truth: &[u8], roi: u8) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "confusion counts need aligned volumes, got {} vs {} voxels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == roi, t == roi) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// F-beta overlap score: `(1+b^2)TP / ((1+b^2)TP + b^2 FN + FP)`.
/// Empty-vs-empty (tp = fp = fn = 0) scores 1: both raters agree the
/// structure is absent.
pub fn f_beta(c: &ConfusionCounts, beta: f64) -> f64 {
    if c.true_pos == 0 && c.false_pos == 0 && c.false_neg == 0 {
        return 1.0;
    }
    let b2 = beta * beta;
    let num = (1.0 + b2) * c.true_pos as f64;
    num / (num + b2 * c.false_neg as f64 + c.false_pos as f64)
}

/// Mean of true-positive and true-negative rates; a rate with an empty
/// denominator counts as 1 (vacuous class).
pub fn balanced_accuracy(c: &ConfusionCounts) -> f64 {
    let tpr = if c.true_pos + c.false_neg == 0 {
        1.0
    } else {
        c.true_pos as f64 / (c.true_pos + c.false_neg) as f64
    };
    let tnr = if c.true_neg + c.false_pos == 0 {
        1.0
    } else {
        c.true_neg as f64 / (c.true_neg + c.false_pos) as f64
    };
    (tpr + tnr) / 2.0
}

/// Concordance correlation coefficient with population (1/n) variances,
/// computed as `2 cov / (var_x + var_y + (mean_x - mean_y)^2)`. Degenerate
/// limits: both variances zero with equal means -> 1; variance zero on
/// exactly one side -> 0 (covariance vanishes).
pub fn concordance_ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::validation(format!(
            "concordance needs equal-length sequences, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::validation("concordance needs at least 2 samples".to_string()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cov / denom)
}

/// Per-ROI scores and volume estimates for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiScores {
    pub bacc: f64,
    pub f1: f64,
    pub f2: f64,
    pub volume_pred_mm3: f64,
    pub volume_true_mm3: f64,
    /// The empty-vs-empty convention fired (ROI absent from both volumes).
    pub empty_both: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScores {
    pub subject: String,
    pub per_roi: Vec<(u8, RoiScores)>,
}

/// Evaluate one subject's predicted labels against the ground truth for a
/// list of ROI labels. Volumes are voxel counts times the voxel volume.
pub fn evaluate_subject(
    subject: &str,
    pred: &[u8],
    truth: &[u8],
    rois: &[u8],
    voxel_volume_mm3: f64,
) -> Result<SubjectScores> {
    let mut per_roi = Vec::with_capacity(rois.len());
    for &roi in rois {
        let c = confusion_counts(pred, truth, roi)?;
        let scores = RoiScores {
            bacc: balanced_accuracy(&c),
            f1: f_beta(&c, 1.0),
            f2: f_beta(&c, 2.0),
            volume_pred_mm3: (c.true_pos + c.false_pos) as f64 * voxel_volume_mm3,
            volume_true_mm3: (c.true_pos + c.false_neg) as f64 * voxel_volume_mm3,
            empty_both: c.true_pos == 0 && c.false_pos == 0 && c.false_neg == 0,
        };
        per_roi.push((roi, scores));
    }
    Ok(SubjectScores {
        subject: subject.to_string(),
        per_roi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let c = confusion_counts(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 1,
                false_pos: 1,
                false_neg: 1,
                true_neg: 1
            }
        );
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let v = [0u8, 1, 2, 1, 0];
        for roi in 0..3 {
            let c = confusion_counts(&v, &v, roi).unwrap();
            assert_eq!(c.false_pos, 0);
            assert_eq!(c.false_neg, 0);
            assert_eq!(f_beta(&c, 1.0), 1.0);
            assert_eq!(balanced_accuracy(&c), 1.0);
        }
    }

    #[test]
    fn roi_absent_from_both_scores_one() {
        let c = confusion_counts(&[0, 0], &[0, 0], 7).unwrap();
        assert_eq!(c.true_neg, 2);
        assert_eq!(f_beta(&c, 1.0), 1.0);
        assert_eq!(f_beta(&c, 2.0), 1.0);
        assert_eq!(balanced_accuracy(&c), 1.0);
    }

    #[test]
    fn f_scores_match_direct_substitution() {
        let c = ConfusionCounts {
            true_pos: 2,
            false_pos: 1,
            false_neg: 1,
            true_neg: 0,
        };
        assert!((f_beta(&c, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        let c = ConfusionCounts {
            true_pos: 1,
            false_neg: 1,
            false_pos: 0,
            true_neg: 0,
        };
        assert!((f_beta(&c, 2.0) - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn bacc_degenerate_predictor_scores_half() {
        // All-background prediction with foreground present: TPR 0, TNR 1.
        let c = confusion_counts(&[0, 0, 0, 0], &[1, 1, 0, 0], 1).unwrap();
        assert_eq!(balanced_accuracy(&c), 0.5);
        let c = ConfusionCounts {
            true_pos: 1,
            false_neg: 1,
            true_neg: 2,
            false_pos: 2,
        };
        assert_eq!(balanced_accuracy(&c), 0.5);
    }

    #[test]
    fn dice_equals_set_formula() {
        // F1 == 2|X n Y| / (|X| + |Y|) for random-ish masks.
        let pred = [1u8, 1, 0, 1, 0, 0, 1, 0];
        let truth = [1u8, 0, 0, 1, 1, 0, 0, 0];
        let c = confusion_counts(&pred, &truth, 1).unwrap();
        let inter = pred
            .iter()
            .zip(&truth)
            .filter(|(&p, &t)| p == 1 && t == 1)
            .count() as f64;
        let sx = pred.iter().filter(|&&p| p == 1).count() as f64;
        let sy = truth.iter().filter(|&&t| t == 1).count() as f64;
        assert_eq!(f_beta(&c, 1.0), 2.0 * inter / (sx + sy));
    }

    #[test]
    fn ccc_direct_substitutions() {
        // y = x + 1: rho = 1, var 2/3 each, mean gap 1 -> 4/7.
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 2.0, 3.0];
        assert!((concordance_ccc(&x, &y).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        // y = -x over symmetric x: equal means, rho = -1.
        let x = [-1.0, 0.0, 1.0];
        let y = [1.0, 0.0, -1.0];
        assert!((concordance_ccc(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        // Perfect agreement.
        let x = [0.3, 1.7, 2.9, -4.0];
        assert_eq!(concordance_ccc(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ccc_degenerate_variances() {
        assert_eq!(concordance_ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(concordance_ccc(&[2.0, 2.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(concordance_ccc(&[1.0], &[1.0]).is_err());
        assert!(concordance_ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn subject_evaluation_composes_counts_and_volumes() {
        let pred = [1u8, 1, 0, 0, 2, 0];
        let truth = [1u8, 0, 1, 0, 2, 2];
        let s = evaluate_subject("s1", &pred, &truth, &[1, 2, 3], 2.0).unwrap();
        assert_eq!(s.per_roi.len(), 3);
        let (_, r1) = &s.per_roi[0];
        assert!((r1.f1 - 2.0 * 1.0 / (2.0 + 2.0)).abs() < 1e-15);
        assert_eq!(r1.volume_pred_mm3, 4.0);
        assert_eq!(r1.volume_true_mm3, 4.0);
        let (_, r3) = &s.per_roi[2];
        assert!(r3.empty_both);
        assert_eq!(r3.f1, 1.0);
    }
}
