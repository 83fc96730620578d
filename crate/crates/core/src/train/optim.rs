use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVisit, TransformerParams};

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moments, one pair of arrays per parameter array in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn new(params: &TransformerParams) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, a| m.push(ArrayD::zeros(a.raw_dim())));
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(
    params: &mut TransformerParams,
    grads: &TransformerParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut gs = Vec::new();
    let mut bad = None;
    grads.visit("", &mut |name, g| {
        if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
            bad = Some(name);
        }
        gs.push(g);
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite { what: format!("gradient of {name}"), step: state.step as usize + 1 });
    }
    if gs.len() != state.m.len() {
        return Err(Error::Invalid(format!("optimizer state holds {} arrays but the model has {}", state.m.len(), gs.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    params.visit_mut("", &mut |_, mut p| {
        Zip::from(&mut p).and(&gs[i]).and(&mut state.m[i]).and(&mut state.v[i]).for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
        i += 1;
    });
    Ok(())
}

pub fn global_norm(grads: &TransformerParams) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |_, g| sq += g.iter().map(|v| v * v).sum::<f64>());
    sq.sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut TransformerParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.visit_mut("", &mut |_, mut g| g *= scale);
    }
    norm
}
