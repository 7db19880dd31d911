use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// parameters added later (progressive growing) get fresh state.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter holding a gradient.
    pub fn step(&mut self, params: &ParamStore) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for (name, p) in params.trainable() {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let m = self
                    .first
                    .entry(name.to_string())
                    .or_insert_with(|| g.zeros_like());
                let _ = m.g_mul_scalar_(beta1);
                let _ = m.g_add_(&(&g * (1.0 - beta1)));
                let v = self
                    .second
                    .entry(name.to_string())
                    .or_insert_with(|| g.zeros_like());
                let _ = v.g_mul_scalar_(beta2);
                let _ = v.g_add_(&(&g * &g * (1.0 - beta2)));
                let m_hat = &self.first[name] / bc1;
                let v_hat = &self.second[name] / bc2;
                let update = m_hat / (v_hat.sqrt() + epsilon) * learning_rate;
                let _ = p.shallow_clone().g_sub_(&update);
            }
        });
    }
}
