use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay:
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g²
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn from_state(config: AdamWConfig, step: u64, moments: IndexMap<String, Moments>) -> Self {
        Self { config, step, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &IndexMap<String, Moments> {
        &self.moments
    }

    /// Updates every trainable parameter. Trainable parameters missing from
    /// `grads` are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let grads: std::collections::HashMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let value = store.value(&name)?;
            let n = value.numel();
            let g = grads.get(name.as_str());
            if let Some(g) = g {
                if g.numel() != n {
                    return Err(Error::shape(format!("gradient for {name} has the wrong size")));
                }
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut p = value.to_vec();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                p[i] -= c.lr * c.weight_decay * p[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            let shape = value.shape().to_vec();
            store.set(&name, Tensor::new(&shape, p)?)?;
        }
        Ok(())
    }
}
