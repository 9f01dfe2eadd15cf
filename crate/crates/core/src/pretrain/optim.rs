//! Adam with linear warmup and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::model::EncoderModel;
use crate::params::Parameterized;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub first: EncoderModel<T>,
    pub second: EncoderModel<T>,
    /// Number of updates applied so far.
    pub updates: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &EncoderModel<T>) -> Self {
        Self {
            first: model.zeros_like(),
            second: model.zeros_like(),
            updates: 0,
        }
    }

    /// Clips `grad` in place and applies one update. Returns the pre-clip
    /// gradient norm.
    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        lr: f64,
        model: &mut EncoderModel<T>,
        grad: &mut EncoderModel<T>,
    ) -> f64 {
        let norm = grad.squared_norm().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grad.scale(T::lit(cfg.grad_clip / norm));
        }
        self.updates += 1;
        let t = self.updates as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(t));
        let c2 = 1.0 / (1.0 - b2.powi(t));
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (c1t, c2t, lrt, eps) = (T::lit(c1), T::lit(c2), T::lit(lr), T::lit(cfg.epsilon));
        let params = model.params_mut();
        let grads = grad.params();
        let firsts = self.first.params_mut();
        let seconds = self.second.params_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(firsts).zip(seconds) {
            for i in 0..p.len() {
                m[i] = b1t * m[i] + one_b1 * g[i];
                v[i] = b2t * v[i] + one_b2 * g[i] * g[i];
                let mhat = m[i] * c1t;
                let vhat = v[i] * c2t;
                p[i] -= lrt * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}
