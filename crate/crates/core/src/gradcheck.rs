//! Central-difference gradient verification.
//!
//! Compares an analytic gradient against `(f(th+h) - f(th-h)) / 2h` per
//! sampled coordinate, in double precision. The relative error metric is
//! `|ga - gn| / max(1, |ga| + |gn|)`.

use crate::error::{Error, Result};
use crate::net::params::ModelParams;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    /// Coordinates checked per tensor; tensors at most this large are checked
    /// exhaustively, larger ones at evenly spaced sample points.
    pub samples_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} over {} coordinates (tol {:.1e}): {}",
            self.max_rel_error,
            self.coords_checked,
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        if let Some((name, idx)) = &self.worst {
            write!(f, " [worst at {name}[{idx}]]")?;
        }
        Ok(())
    }
}

fn sample_indices(numel: usize, samples: usize) -> Vec<usize> {
    if numel <= samples {
        (0..numel).collect()
    } else {
        // Evenly spaced, deterministic.
        (0..samples).map(|i| i * numel / samples).collect()
    }
}

/// Verify the analytic gradient of a scalar-valued function of the model
/// parameters. `forward` must be a pure function of the parameter values;
/// `analytic` produces the gradient being checked (typically via the tape).
pub fn gradient_check(
    forward: impl Fn(&ModelParams<f64>) -> Result<f64>,
    analytic: &Gradients<f64>,
    params: &ModelParams<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckResult> {
    let base = forward(params)?;
    if !base.is_finite() {
        return Err(Error::integrity(format!(
            "gradient check aborted: forward produced non-finite loss {base}"
        )));
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;

    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let ga_tensor: Tensor<f64> = analytic
            .get(name)
            .ok_or_else(|| Error::integrity(format!("analytic gradient missing parameter '{name}'")))?
            .clone();
        let numel = ga_tensor.numel();
        for idx in sample_indices(numel, cfg.samples_per_tensor) {
            let orig = work.get(name)?.data()[idx];

            work.get_mut(name)?.data_mut()[idx] = orig + cfg.h;
            let f_plus = forward(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig - cfg.h;
            let f_minus = forward(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::integrity(format!(
                    "gradient check aborted: non-finite loss while perturbing {name}[{idx}]"
                )));
            }
            let gn = (f_plus - f_minus) / (2.0 * cfg.h);
            let ga = ga_tensor.data()[idx];
            let rel = (ga - gn).abs() / 1.0f64.max(ga.abs() + gn.abs());
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((name.clone(), idx));
            }
        }
    }

    Ok(GradCheckResult {
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        tol: cfg.tol,
        pass: max_rel <= cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn quadratic_params() -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();
        p
    }

    fn sum_of_squares(p: &ModelParams<f64>) -> Result<f64> {
        Ok(p.get("x")?.data().iter().map(|v| v * v).sum())
    }

    fn grads_from(pairs: Vec<(&str, Tensor<f64>)>) -> Gradients<f64> {
        let mut map = IndexMap::new();
        for (k, v) in pairs {
            map.insert(k.to_string(), v);
        }
        Gradients::from_map(map)
    }

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        let p = quadratic_params();
        let analytic = grads_from(vec![(
            "x",
            Tensor::from_f64_slice(&[2], &[2.0, 4.0]).unwrap(),
        )]);
        let res = gradient_check(sum_of_squares, &analytic, &p, &GradCheckConfig::default()).unwrap();
        assert!(res.pass, "{res}");
        assert!(res.max_rel_error < 1e-8, "{res}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let p = quadratic_params();
        // Deliberately scaled x2.
        let analytic = grads_from(vec![(
            "x",
            Tensor::from_f64_slice(&[2], &[4.0, 8.0]).unwrap(),
        )]);
        let res = gradient_check(sum_of_squares, &analytic, &p, &GradCheckConfig::default()).unwrap();
        assert!(!res.pass, "{res}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let p = quadratic_params();
        let analytic = grads_from(vec![("x", Tensor::zeros(&[2]))]);
        let bad = |_: &ModelParams<f64>| Ok(f64::NAN);
        let err = gradient_check(bad, &analytic, &p, &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn sampling_covers_small_tensors_exhaustively() {
        assert_eq!(sample_indices(5, 32), vec![0, 1, 2, 3, 4]);
        let s = sample_indices(1000, 32);
        assert_eq!(s.len(), 32);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(*s.last().unwrap() < 1000);
    }
}
