use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore};
use crate::error::{bail, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    /// One update at an explicit learning rate (for schedules).
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &ParamGrads<f32>,
        lr: f32,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            bail!(
                State,
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.m.len(),
                params.len(),
                grads.len()
            );
        }
        if let Some(id) = params.ids().find(|&id| grads.get(id).is_none()) {
            bail!(State, "missing gradient for parameter {}", params.name(id));
        }
        let c = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                p[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
