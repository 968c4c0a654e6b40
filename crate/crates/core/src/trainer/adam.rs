use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter id; buffers
/// carry empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |e: &crate::model::ParamEntry| match e.kind {
            ParamKind::Trainable => Tensor::zeros(e.value.shape()),
            ParamKind::Buffer => Tensor::zeros(&[0]),
        };
        Self {
            config,
            m: params.entries().iter().map(zeros).collect(),
            v: params.entries().iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Applies one update with learning rate `rate`. Parameters without a
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<usize, Tensor>, rate: f64) -> Result<()> {
        for (&id, g) in grads {
            let entry = &params.entries()[id];
            if entry.kind != ParamKind::Trainable || g.shape() != entry.value.shape() {
                return Err(Error::shape("adam", format!("gradient for {} has shape {:?}", entry.name, g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(entry.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<usize> = params.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.get(&id);
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
