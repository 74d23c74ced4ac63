use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PolicyParams;

/// AdamW moments and update counter. Weight decay is decoupled: `theta *= 1 - lr * wd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }
}

/// Linear warmup over the first `warmup` updates, then constant.
pub fn lr_schedule(base_lr: f64, warmup: usize, update: u64) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    base_lr * ((update + 1) as f64 / warmup as f64).min(1.0)
}

pub fn global_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns `(before, after)`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
        (norm, max_norm)
    } else {
        (norm, norm)
    }
}

/// Clips, then applies one AdamW step. Returns the post-clip gradient norm.
pub fn optimizer_update(
    params: &mut PolicyParams,
    grad: &mut [f64],
    state: &mut AdamW,
    lr: f64,
    weight_decay: f64,
    clip_norm: f64,
) -> Result<f64> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            actual: grad.len().min(state.m.len()).min(state.v.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            batch_id: state.t as usize,
        });
    }
    let (_, post) = clip_grad_norm(grad, clip_norm);
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .flat_mut()
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let step = (*m / bc1) / ((*v / bc2).sqrt() + state.eps);
        *p = *p * decay - lr * step;
    }
    Ok(post)
}
