//! Adam optimizer with bias correction. The learning-rate schedule lives in
//! [`crate::train::lr_at_epoch`]; the step itself takes the current rate.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::tape::Gradients;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct OptimizerState<E: Element> {
    first_moment: IndexMap<String, Tensor<E>>,
    second_moment: IndexMap<String, Tensor<E>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &ModelParams<E>, base_lr: f64, decay_factor: f64) -> Self {
        let zeros = |p: &ModelParams<E>| -> IndexMap<String, Tensor<E>> {
            p.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect()
        };
        OptimizerState {
            first_moment: zeros(params),
            second_moment: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            decay_factor,
        }
    }
}

/// One bias-corrected Adam update over every parameter, in enumeration order.
/// Moments are tracked per parameter; batchnorm running statistics are not
/// touched.
pub fn adam_step<E: Element>(
    params: &mut ModelParams<E>,
    grads: &Gradients<E>,
    state: &mut OptimizerState<E>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::integrity(format!("missing gradient for parameter '{name}'")))?;
        if !g.same_shape(theta) {
            return Err(Error::integrity(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                theta.shape()
            )));
        }
        let m = state
            .first_moment
            .get_mut(name)
            .ok_or_else(|| Error::integrity(format!("missing first moment for '{name}'")))?;
        let v = state
            .second_moment
            .get_mut(name)
            .ok_or_else(|| Error::integrity(format!("missing second moment for '{name}'")))?;
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        for i in 0..theta.numel() {
            let gi = g.data()[i].to_f64();
            let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = E::from_f64(mi);
            v.data_mut()[i] = E::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + eps);
            theta.data_mut()[i] = E::from_f64(theta.data()[i].to_f64() - update);
        }
    }
    Ok(())
}
