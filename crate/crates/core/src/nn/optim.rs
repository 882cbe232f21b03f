use std::f64::consts::PI;

use super::params::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Fraction of total steps spent in linear warm-up.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 2e-3,
            min_lr: 1e-6,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::config(
                "peak_lr",
                "need 0 <= min_lr <= peak_lr and peak_lr > 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "betas must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak_lr`, then cosine decay to `min_lr` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(config: &OptimConfig, total_steps: usize) -> Self {
        LrSchedule {
            peak: config.peak_lr,
            min: config.min_lr,
            warmup_steps: (config.warmup_frac * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self
            .total_steps
            .saturating_sub(self.warmup_steps)
            .saturating_sub(1);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay. Decay applies to linear weight matrices
/// (names ending in `.w`) only.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.to_flat();
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        assert_eq!(
            self.m.len(),
            g.len(),
            "optimizer state does not match parameters"
        );
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut off = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, data| {
            let decay = name.ends_with(".w") || name == "w";
            for (i, p) in data.iter_mut().enumerate() {
                let k = off + i;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                if decay {
                    *p -= lr * c.weight_decay * *p;
                }
                *p -= lr * update;
            }
            off += data.len();
        });
    }
}
