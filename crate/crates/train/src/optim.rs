//! AdamW: adaptive moments with bias correction and decoupled weight decay.

use poolcall_core::{sc, ParamStore, Scalar};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        AdamWCfg { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: one pair of moment vectors per trainable parameter, in
/// store iteration order. Moments are kept in f64 regardless of the model's
/// scalar type.
pub struct AdamW {
    pub cfg: AdamWCfg,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWCfg) -> Self {
        AdamW { cfg, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `store`, leaving
    /// the accumulators untouched. A non-finite gradient aborts before any
    /// parameter changes.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad { param: p.name.clone() });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let mut slot = 0usize;
        for (_, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            if self.moments.len() == slot {
                let n = p.value.numel();
                self.moments.push((vec![0.0; n], vec![0.0; n]));
            }
            let (m, v) = &mut self.moments[slot];
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i].to_f64().unwrap();
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let theta = p.value.data()[i].to_f64().unwrap();
                let updated =
                    theta - lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * theta);
                p.value.data_mut()[i] = sc::<T>(updated);
            }
            slot += 1;
        }
        Ok(())
    }
}
