use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter, in
/// store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let v = m.clone();
        Adam {
            config,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        contract!(
            self.m.len() == store.len(),
            "optimizer tracks {} parameters, store has {}",
            self.m.len(),
            store.len()
        );
        for ((param, m), v) in store.iter_mut().zip(&self.m).zip(&self.v) {
            contract!(
                m.shape() == param.value.shape() && v.shape() == param.value.shape(),
                "optimizer state shape mismatch for {}",
                param.name
            );
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((param, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if param.decay_exempt {
                0.0
            } else {
                weight_decay
            };
            let values = param.value.data_mut();
            let grads = param.grad.data();
            for (((w, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate when the monitored loss has not improved by
/// more than `epsilon` within `window` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauHalving {
    pub epsilon: f64,
    pub window: usize,
    best: f64,
    last_improvement: usize,
}

impl PlateauHalving {
    pub fn new(epsilon: f64, window: usize) -> Self {
        PlateauHalving {
            epsilon,
            window,
            best: f64::INFINITY,
            last_improvement: 0,
        }
    }

    /// Records the loss observed at `step`; returns true when the rate should halve.
    pub fn observe(&mut self, step: usize, loss: f64) -> bool {
        if loss < self.best - self.epsilon {
            self.best = loss;
            self.last_improvement = step;
            return false;
        }
        if step.saturating_sub(self.last_improvement) >= self.window {
            self.last_improvement = step;
            return true;
        }
        false
    }
}
