//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update with a single learning rate.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, cfg: &AdamConfig) -> Result<()> {
    adam_step_with(params, grads, moments, cfg, |_| lr)
}

/// One Adam update where the learning rate may depend on the element index.
pub fn adam_step_with(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    cfg: &AdamConfig,
    lr: impl Fn(usize) -> f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.len()
        )));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr(i) * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
