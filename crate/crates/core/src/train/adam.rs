use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::nn::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            bail!(Config, "Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            bail!(Config, "Adam eps must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable entry of `store` from `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.0.len() != store.len() {
            bail!(
                Size,
                "{} gradients for {} parameters",
                grads.0.len(),
                store.len()
            );
        }
        if self.m.is_empty() {
            self.m = store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - math::pow(beta1, t);
        let c2 = 1.0 - math::pow(beta2, t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.0[i].as_ref() else {
                continue;
            };
            if g.numel() != self.m[i].len() {
                bail!(
                    Size,
                    "gradient for {} has {} values",
                    store.entry(id).name,
                    g.numel()
                );
            }
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(&mut self.m[i])
                .zip(&mut self.v[i])
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / (math::sqrt(*v / c2) + eps);
            }
        }
        Ok(())
    }
}
