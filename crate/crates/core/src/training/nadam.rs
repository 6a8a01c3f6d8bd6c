use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::{Grads, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Nesterov-accelerated Adam with a constant momentum coefficient:
///
/// ```text
/// m  ← β1·m + (1−β1)·g           n ← β2·n + (1−β2)·g²
/// m̂  = β1·m / (1−β1^(t+1)) + (1−β1)·g / (1−β1^t)
/// n̂  = n / (1−β2^t)
/// θ  ← θ − η·m̂ / (√n̂ + ε)
/// ```
///
/// Only [`ParamKind::Trainable`] parameters are touched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: NadamConfig,
    pub lr: f64,
    m: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: NadamConfig, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data.len()]).collect::<Vec<_>>();
        Self {
            config,
            lr,
            m: zeros(),
            n: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.n[index]
    }

    /// Applies one update. Nothing is modified if any trainable gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, epoch: usize) -> Result<(), TrainError> {
        for (i, p) in params.iter().enumerate() {
            if p.kind == ParamKind::Trainable && grads.by_index(i).iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                    epoch,
                });
            }
        }
        self.t += 1;
        let NadamConfig { beta1: b1, beta2: b2, epsilon } = self.config;
        let t = self.t as i32;
        let c_next = 1.0 - b1.powi(t + 1);
        let c_now = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let g = grads.by_index(i);
            for (((theta, m), n), &g) in p.data.iter_mut().zip(&mut self.m[i]).zip(&mut self.n[i]).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *n = b2 * *n + (1.0 - b2) * g * g;
                let m_hat = b1 * *m / c_next + (1.0 - b1) * g / c_now;
                let n_hat = *n / c2;
                *theta -= self.lr * m_hat / (n_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
