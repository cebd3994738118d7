//! Adam with decoupled weight decay, and the warmup-then-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{named, named_mut, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

/// Only weight matrices of linear layers are decayed; biases, norms,
/// embeddings and queries are not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<P: Parameters>(config: AdamWConfig, params: &P) -> Self {
        let zeros: Vec<Tensor> = named(params)
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = named(grads);
        let p = named_mut(params);
        if p.len() != self.m.len() || g.len() != p.len() {
            return Err(Error::Validation(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                p.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((name, w), (_, gt)), (m, v)) in p.into_iter().zip(g).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if w.dim() != gt.dim() || w.dim() != m.dim() {
                return Err(Error::Validation(format!("shape mismatch for {name}")));
            }
            if decays(&name) && c.weight_decay > 0.0 {
                w.mapv_inplace(|x| x * (1.0 - lr * c.weight_decay));
            }
            ndarray::Zip::from(w)
                .and(gt)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Warmup length for a run: `fraction` of all steps, at least one step.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).ceil() as usize).clamp(1, total.max(1))
}
