//! Adam and the cosine-annealed learning-rate schedule used by every
//! training loop in the crate.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: usize) -> Result<Self> {
        if !(lr_start >= lr_end && lr_end > 0.0) {
            return Err(Error::Invalid(format!(
                "cosine schedule requires lr_start >= lr_end > 0, got {lr_start}, {lr_end}"
            )));
        }
        Ok(Self {
            lr_start,
            lr_end,
            total_steps,
        })
    }

    /// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Invalid(format!(
                "schedule step {step} out of range 0..={}",
                self.total_steps
            )));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}
