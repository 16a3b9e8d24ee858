use crate::error::{Error, Result};

use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Scales `grads` in place so their global norm is at most `clip_norm`;
    /// returns the norm before clipping.
    pub fn clip(&self, grads: &mut [Vec<f64>]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > self.config.clip_norm {
            let scale = self.config.clip_norm / (norm + 1e-6);
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
        }
        norm
    }

    /// One update: clip, decay the decayed tensors by `1 − lr·wd`, then the
    /// bias-corrected Adam step.
    pub fn update(&mut self, params: &mut ModelParams, mut grads: Vec<Vec<f64>>) -> f64 {
        let norm = self.clip(&mut grads);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (idx, g) in grads.iter().enumerate() {
            let decay = if params.decays(idx) { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let p = params.tensors[idx].data_mut();
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        norm
    }
}
