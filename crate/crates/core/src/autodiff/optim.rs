use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `step` (1-based), then zeroes the gradients.
pub fn adam_step(store: &mut ParamStore, config: &AdamConfig, step: u64) {
    assert!(step >= 1, "Adam steps are 1-based");
    let AdamConfig { lr, beta1, beta2, eps } = *config;
    let bias1 = 1.0 - beta1.powi(step as i32);
    let bias2 = 1.0 - beta2.powi(step as i32);
    for p in store.iter_mut() {
        let values = p.value.data_mut();
        let grads = p.grad.data();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.zero_grads();
}

/// Adam with its own step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        adam_step(store, &self.config, self.steps);
    }

    /// Same as [`Adam::step`] with a one-off learning rate (for schedules).
    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        let config = AdamConfig { lr, ..self.config };
        adam_step(store, &config, self.steps);
    }
}
