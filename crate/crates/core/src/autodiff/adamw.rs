use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers start at zero and are
/// allocated on the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::Shape { op: "adamw", lhs: [params.len(), 1], rhs: [grads.len(), 1] });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(AutodiffError::Shape { op: "adamw", lhs: p.shape(), rhs: [g.len(), 1] });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(AutodiffError::Invalid { op: "adamw", msg: "parameter layout changed between steps".into() });
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - math::powi(beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(beta2, self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                *w -= lr * weight_decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}
