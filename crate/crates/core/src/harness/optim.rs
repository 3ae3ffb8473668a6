use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            min_lr: 2e-6,
            weight_decay: 1e-2,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 35.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate of step `step` (0-based) out of `total`: linear warmup, then cosine
    /// decay that reaches `min_lr` on the last step.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 || step + 1 >= total {
            return self.min_lr;
        }
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let t = (step - self.warmup_steps) as f64 / (total - 1 - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// Decoupled-weight-decay Adam. Weight decay skips rank-1 tensors (biases, norm scales).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One update with learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &OptimConfig) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let decay = if param.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j] * clip;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * *w);
            }
        }
        Ok(norm)
    }
}
