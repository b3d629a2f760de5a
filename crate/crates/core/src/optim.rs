//! Adaptive-moment optimiser with decoupled weight decay, and the step schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::error::{GaitError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![F::zero(); e.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient are only decayed.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(GaitError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let step_size = F::from_f64_lossy(lr / bc1);
        let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
        let eps = F::from_f64_lossy(c.eps);
        let decay = F::one() - F::from_f64_lossy(lr * c.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id).data_mut();
            if c.weight_decay != 0.0 {
                for x in p.iter_mut() {
                    *x = *x * decay;
                }
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// `base * factor^(number of milestones passed)`, for 1-based `iteration`.
pub fn step_lr(base: f64, factor: f64, milestones: &[usize], iteration: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration > m).count();
    base * factor.powi(passed as i32)
}
