//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("invalid optimiser settings {self:?}")))
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One update. Parameters without a gradient slot are treated as having a
/// zero gradient (they still decay).
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
/// p ← p − lr · (m / (1−β1ᵗ)) / (sqrt(v / (1−β2ᵗ)) + ε)
/// ```
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(HarnessError::State(format!(
            "optimiser state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(HarnessError::State(format!(
                "optimiser state for tensor {i} holds {} values, parameter has {}",
                state.m[i].len(),
                p.numel()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            *x *= shrink;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            *x -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
