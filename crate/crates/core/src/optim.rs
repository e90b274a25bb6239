//! Adam with decoupled weight decay and per-group learning rates.
//!
//! For each parameter `θ` with gradient `g` at step `t` (counted from 1):
//!
//! ```text
//! θ ← θ · (1 − lr · wd)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    /// Completed update steps.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `groups` must partition the store: every parameter in exactly one.
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>, store: &ParamStore) -> Result<Self> {
        let mut owner = vec![None::<usize>; store.len()];
        for (gi, group) in groups.iter().enumerate() {
            for &id in &group.params {
                match owner.get_mut(id.index()) {
                    Some(slot @ None) => *slot = Some(gi),
                    Some(Some(_)) => {
                        return Err(Error::Config(format!(
                            "parameter {} is in two groups",
                            store.name(id)
                        )))
                    }
                    None => return Err(Error::UnknownParam(format!("#{}", id.index()))),
                }
            }
        }
        if let Some(orphan) = owner.iter().position(Option::is_none) {
            let id = store.ids().nth(orphan).expect("in range");
            return Err(Error::Config(format!("parameter {} is in no group", store.name(id))));
        }
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            groups,
            step: 0,
            m,
            v,
        })
    }

    pub fn single_group(config: AdamWConfig, lr: f64, store: &ParamStore) -> Result<Self> {
        let group = ParamGroup {
            name: "base".to_string(),
            lr,
            params: store.ids().collect(),
        };
        Self::new(config, vec![group], store)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_of(&self, id: ParamId) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.params.contains(&id))
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Restores saved moments; lengths must match.
    pub fn set_moments(&mut self, id: ParamId, m: &[f64], v: &[f64]) -> Result<()> {
        let i = id.index();
        if self.m[i].len() != m.len() || self.v[i].len() != v.len() {
            return Err(Error::LengthMismatch(self.m[i].len(), m.len()));
        }
        self.m[i].copy_from_slice(m);
        self.v[i].copy_from_slice(v);
        Ok(())
    }

    pub fn update(&mut self, store: &mut ParamStore) {
        self.update_scaled(store, 1.0);
    }

    /// One update with every group's learning rate multiplied by `lr_scale`.
    pub fn update_scaled(&mut self, store: &mut ParamStore, lr_scale: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for group in &self.groups {
            let lr = group.lr * lr_scale;
            for &id in &group.params {
                let (theta, grad) = store.get_mut(id).data_and_grad_mut();
                let Some(grad) = grad else { continue };
                let m = &mut self.m[id.index()];
                let v = &mut self.v[id.index()];
                for i in 0..theta.len() {
                    let g = grad[i];
                    theta[i] *= 1.0 - lr * c.weight_decay;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= lr * m_hat / (libm::sqrt(v_hat) + c.eps);
                }
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = store.get_mut(id).grad_mut() {
                for v in g {
                    *v *= s;
                }
            }
        }
    }
    norm
}
