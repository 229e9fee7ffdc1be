use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter accepted by `trainable` from its accumulated
    /// gradient.
    pub fn step(&mut self, store: &mut ParameterStore, trainable: &dyn Fn(&str) -> bool) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, p) in store.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| p.value.zeros_like());
            let v = self.v.entry(name.to_string()).or_insert_with(|| p.value.zeros_like());
            let decay = 1.0 - c.lr * c.weight_decay;
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g[i];
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g[i] * g[i];
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                w[i] = w[i] * decay - c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad.scale_assign(s);
        }
    }
    norm
}
