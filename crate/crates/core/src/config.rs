use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::root::RootConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

/// Hyperparameters of the Shampoo optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShampooConfig {
    /// Base learning rate; the grafted step has norm `eta0·‖M_t‖_F`.
    pub eta0: f64,
    /// Momentum for both the grafted direction and the preconditioned one.
    pub beta1: f64,
    /// `1` accumulates plain sums of statistics, `< 1` an exponential average.
    pub beta2: f64,
    /// Statistics start at `eps_stat·I`.
    pub eps_stat: f64,
    /// Interval in steps between gathering finished roots (and submitting new ones).
    pub kappa: u64,
    /// Steps before which only the grafted diagonal direction is used.
    pub tau: u64,
    /// Root jobs are submitted on every `root_update_interval`-th gather boundary.
    pub root_update_interval: u64,
    pub block_size: usize,
    /// Dimensions larger than this are left unpreconditioned.
    pub max_precond_dim: usize,
    pub root_cfg: RootConfig,
    /// `true`: `η_t = η₀‖M_t‖/‖P_t‖` from the momentum buffers.
    /// `false`: ratio of the instantaneous preconditioned gradients.
    pub graft_momentum: bool,
    /// L2 coefficient added to the gradient before any statistics see it.
    pub weight_decay: f64,
    /// Floor applied to the diagonal accumulator before its inverse square root.
    pub diag_floor: f64,
}

impl Default for ShampooConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            beta1: 0.9,
            beta2: 1.0,
            eps_stat: 1e-6,
            kappa: 500,
            tau: 1000,
            root_update_interval: 1,
            block_size: 1024,
            max_precond_dim: 4096,
            root_cfg: RootConfig::default(),
            graft_momentum: true,
            weight_decay: 0.0,
            diag_floor: 1e-30,
        }
    }
}

impl ShampooConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError(msg.to_string()));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return fail("eta0 must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return fail("beta1 must lie in [0, 1)");
        }
        if !(self.beta2 > 0.0 && self.beta2 <= 1.0) {
            return fail("beta2 must lie in (0, 1]");
        }
        if !(self.eps_stat >= 0.0) {
            return fail("eps_stat must be >= 0");
        }
        if self.kappa < 1 {
            return fail("kappa must be >= 1");
        }
        if self.root_update_interval < 1 {
            return fail("root_update_interval must be >= 1");
        }
        if self.block_size < 1 || self.max_precond_dim < 1 {
            return fail("block_size and max_precond_dim must be >= 1");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0");
        }
        if !(self.diag_floor > 0.0) {
            return fail("diag_floor must be > 0");
        }
        self.root_cfg
            .validate()
            .map_err(|e| ConfigError(e.to_string()))
    }
}
