use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step applies `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)` with bias-corrected
/// moments `m̂`, `v̂`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match parameter set".into()));
        }
        if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                params.name(id)
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let k = id.index();
            let tensor = params.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            if self.m[k].len() != grad.len() {
                return Err(Error::Contract(format!("optimizer moment shape mismatch at parameter {k}")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for ((p, g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
        Ok(())
    }
}
