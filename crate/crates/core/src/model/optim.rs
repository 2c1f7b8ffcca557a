//! Adam with linear warmup and optional global-norm clipping.

use super::Params;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly from `lr / warmup` to `lr`.
    pub warmup: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup: 0, grad_clip: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Domain("Adam eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Domain(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Params,
    v: Params,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &Params) -> Result<Self> {
        config.validate()?;
        let mut m = like.clone();
        m.scale(0.0);
        let v = m.clone();
        Ok(Self { config, m, v, step: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup as f64;
        let next = (self.step + 1) as f64;
        if w > 0.0 && next < w {
            self.config.lr * next / w
        } else {
            self.config.lr
        }
    }

    /// Restart the warmup ramp without forgetting the moment estimates.
    pub fn restart_warmup(&mut self, warmup: usize) {
        self.config.warmup = warmup;
    }

    /// Applies one update in place and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut Params, grad: &Params) -> f64 {
        let norm = grad.norm();
        let clip = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        let g = grad.tensors();
        for (((p, m), v), (_, _, g)) in p.into_iter().zip(m).zip(v).zip(g) {
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        norm
    }
}
