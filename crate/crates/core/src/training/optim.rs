use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate once per `decay_every` steps.
    pub lr_decay: f64,
    pub decay_every: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.005,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_decay: 0.999,
            decay_every: 1000,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate in effect at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.lr_decay.powi((step / self.decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.decay_every > 0
            && self.clip_norm.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DssError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed update count.
    pub t: u64,
}

impl AdamWState {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamWState { m, v, t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One AdamW update with decoupled weight decay, bias correction, the
/// stepwise learning-rate decay and global-norm clipping. `step` is the
/// 0-based index of this update. Leaves everything untouched and fails on a
/// non-finite gradient.
pub fn adamw_step(weights: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamWState, cfg: &AdamWConfig, step: u64) -> Result<StepInfo> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(DssError::Shape(format!(
            "{} weight tensors, {} gradients, {} optimizer slots",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for (i, (w, g)) in weights.iter().zip(grads).enumerate() {
        if w.len() != g.len() || w.len() != state.m[i].len() {
            return Err(DssError::Shape(format!("tensor #{i}: {} weights, {} gradients", w.len(), g.len())));
        }
        for (j, x) in g.iter().enumerate() {
            if !x.is_finite() {
                return Err(DssError::Numerical(format!("non-finite gradient in tensor #{i} element {j}")));
            }
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let lr = cfg.lr_at(step);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..w.len() {
            let gj = g[j] * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * cfg.weight_decay * w[j];
            w[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(StepInfo { lr, grad_norm: norm })
}
