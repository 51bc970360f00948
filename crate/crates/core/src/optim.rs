//! miniSGD and Adam updates over a flat parameter vector.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimAlgorithm {
    Minisgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: OptimAlgorithm,
    /// Base learning rate (full-rank stage).
    pub eta: f64,
    /// Low-rank stage learning rate; falls back to `eta`.
    pub eta_low_rank: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Multiplicative per-epoch decay (stepsize 1).
    pub lr_decay_gamma: f64,
    pub seed: u64,
    /// Hard cap on epochs at one resolution when the criterion never fires.
    pub max_epochs_per_level: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: OptimAlgorithm::Adam,
            eta: 0.05,
            eta_low_rank: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            lr_decay_gamma: 0.95,
            seed: 0,
            max_epochs_per_level: 40,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.eta_low_rank.is_some_and(|e| e <= 0.0) {
            return Err(Error::InvalidArg("learning rate must be positive".into()));
        }
        if !(0.0 < self.lr_decay_gamma && self.lr_decay_gamma <= 1.0) {
            return Err(Error::InvalidArg("lr_decay_gamma must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be >= 1".into()));
        }
        if self.max_epochs_per_level == 0 {
            return Err(Error::InvalidArg("max_epochs_per_level must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArg("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn stage_eta(&self, low_rank: bool) -> f64 {
        if low_rank {
            self.eta_low_rank.unwrap_or(self.eta)
        } else {
            self.eta
        }
    }
}

/// Per-parameter-vector optimizer state; reset whenever the parameter
/// shape changes (resolution transitions).
#[derive(Debug, Clone)]
pub struct OptimState {
    algorithm: OptimAlgorithm,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimState {
    pub fn new(cfg: &OptimConfig, n_params: usize) -> Self {
        OptimState {
            algorithm: cfg.algorithm,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One update with learning rate `lr`; writes the parameter delta into
    /// `delta` (same length as `grads`).
    pub fn update(&mut self, grads: &[f64], lr: f64, delta: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.m.len());
        debug_assert_eq!(grads.len(), delta.len());
        match self.algorithm {
            OptimAlgorithm::Minisgd => {
                for (d, g) in delta.iter_mut().zip(grads) {
                    *d = -lr * g;
                }
            }
            OptimAlgorithm::Adam => {
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (i, (&g, d)) in grads.iter().zip(delta.iter_mut()).enumerate() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *d = -lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}
