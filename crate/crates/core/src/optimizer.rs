//! Per-step update rules: Shampoo with grafting, and the diagonal AdaGrad,
//! Adam and SGD+momentum baselines it is compared against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ShampooConfig};
use crate::linalg::{elementwise_power, frobenius_norm, hadamard, LinalgError, Matrix};
use crate::state::{PreconditionerState, StateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} parameter tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub eta_t: f64,
    /// `‖M_t‖_F`
    pub graft_norm: f64,
    /// `‖P_t‖_F`, zero when the grafted direction was used.
    pub precond_norm: f64,
    /// Fraction of coordinates whose preconditioned gradient has the
    /// opposite sign of the raw gradient (zeros excluded).
    pub sign_flip_fraction: f64,
    pub used_preconditioner: bool,
}

/// `D^(∘-1/2) ∘ G` with `D` floored first.
pub fn graft_direction(diag: &Matrix, g: &Matrix, floor: f64) -> Result<Matrix, LinalgError> {
    hadamard(&elementwise_power(diag, -0.5, Some(floor))?, g)
}

/// `buf ← beta·buf + (1 − beta)·x`
fn ema(buf: &mut Matrix, beta: f64, x: &Matrix) {
    for (b, v) in buf.data_mut().iter_mut().zip(x.data()) {
        *b = beta * *b + (1.0 - beta) * v;
    }
}

fn sign_flip_fraction(g: &Matrix, pg: &Matrix) -> f64 {
    let (mut flips, mut counted) = (0usize, 0usize);
    for (&a, &b) in g.data().iter().zip(pg.data()) {
        if a == 0.0 || b == 0.0 {
            continue;
        }
        counted += 1;
        if (a > 0.0) != (b > 0.0) {
            flips += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        flips as f64 / counted as f64
    }
}

/// One Shampoo update of a block whose statistics already include `g`.
///
/// `lr_scale` is the learning-rate schedule multiplier; the grafted step
/// length is `eta0·lr_scale·‖M_t‖_F` in both branches.
pub fn shampoo_step(
    state: &mut PreconditionerState,
    g: &Matrix,
    t: u64,
    cfg: &ShampooConfig,
    lr_scale: f64,
) -> Result<(Matrix, UpdateReport), StepError> {
    if g.shape() != state.shape() {
        return Err(StateError::ShapeMismatch {
            expected: state.shape(),
            got: g.shape(),
        }
        .into());
    }
    if !g.is_finite() {
        return Err(StepError::NonFinite("gradient"));
    }
    let beta1 = cfg.beta1;
    let base = cfg.eta0 * lr_scale;
    let graft = graft_direction(&state.diag, g, cfg.diag_floor)?;
    let mut momentum = state.momentum.clone();
    ema(&mut momentum, beta1, &graft);
    if !momentum.is_finite() {
        return Err(StepError::NonFinite("grafted momentum"));
    }
    let graft_norm = frobenius_norm(&momentum);

    if t > cfg.tau {
        if let Some(pg) = state.precondition(g) {
            let mut precond = state.precond_momentum.clone();
            ema(&mut precond, beta1, &pg);
            let precond_norm = frobenius_norm(&precond);
            if !precond.is_finite() || !precond_norm.is_finite() {
                return Err(StepError::NonFinite("preconditioned momentum"));
            }
            if precond_norm > 0.0 {
                let (eta_t, delta) = if cfg.graft_momentum {
                    // step length η₀‖M‖ along the unit direction P/‖P‖
                    let length = base * graft_norm;
                    (length / precond_norm, precond.map(|x| -length * (x / precond_norm)))
                } else {
                    let eta_t = base * frobenius_norm(&graft) / frobenius_norm(&pg);
                    (eta_t, precond.scale(-eta_t))
                };
                if !delta.is_finite() {
                    return Err(StepError::NonFinite("update"));
                }
                let report = UpdateReport {
                    eta_t,
                    graft_norm,
                    precond_norm,
                    sign_flip_fraction: sign_flip_fraction(g, &pg),
                    used_preconditioner: true,
                };
                state.momentum = momentum;
                state.precond_momentum = precond;
                return Ok((delta, report));
            }
        }
    }

    let delta = momentum.scale(-base);
    state.momentum = momentum;
    Ok((
        delta,
        UpdateReport {
            eta_t: base,
            graft_norm,
            precond_norm: 0.0,
            sign_flip_fraction: 0.0,
            used_preconditioner: false,
        },
    ))
}

/// Diagonal AdaGrad with heavy-ball momentum. `accum` must already contain
/// `G∘G`. Shares its arithmetic with the grafted branch of [`shampoo_step`].
pub fn adagrad_step(
    accum: &Matrix,
    momentum: &mut Matrix,
    g: &Matrix,
    eta: f64,
    beta1: f64,
    floor: f64,
) -> Result<Matrix, StepError> {
    let dir = graft_direction(accum, g, floor)?;
    if dir.shape() != momentum.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "adagrad_step",
            left: momentum.shape(),
            right: dir.shape(),
        }
        .into());
    }
    ema(momentum, beta1, &dir);
    if !momentum.is_finite() {
        return Err(StepError::NonFinite("adagrad momentum"));
    }
    Ok(momentum.scale(-eta))
}

/// Bias-corrected Adam; `t` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    m: &mut Matrix,
    v: &mut Matrix,
    g: &Matrix,
    t: u64,
    eta: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Matrix, StepError> {
    if m.shape() != g.shape() || v.shape() != g.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "adam_step",
            left: m.shape(),
            right: g.shape(),
        }
        .into());
    }
    ema(m, beta1, g);
    let g2 = g.map(|x| x * x);
    ema(v, beta2, &g2);
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let delta = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
        let m_hat = m.get(i, j) / c1;
        let v_hat = v.get(i, j) / c2;
        -eta * m_hat / (v_hat.sqrt() + eps)
    });
    Ok(delta)
}

/// Heavy-ball SGD; the L2 term `wd·W` is applied outside the momentum.
pub fn sgd_momentum_step(
    velocity: &mut Matrix,
    g: &Matrix,
    w: &Matrix,
    eta: f64,
    beta1: f64,
    weight_decay: f64,
) -> Result<Matrix, StepError> {
    if velocity.shape() != g.shape() || w.shape() != g.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "sgd_momentum_step",
            left: velocity.shape(),
            right: g.shape(),
        }
        .into());
    }
    for (v, x) in velocity.data_mut().iter_mut().zip(g.data()) {
        *v = beta1 * *v + x;
    }
    let mut dir = velocity.clone();
    if weight_decay != 0.0 {
        dir.axpy(weight_decay, w)?;
    }
    Ok(dir.scale(-eta))
}

/// Learning-rate multiplier applied on top of every optimizer's base rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `t / steps`, capped at one.
    LinearWarmup { steps: u64 },
    /// `(t / steps)²`, capped at one.
    QuadraticWarmup { steps: u64 },
    /// Linear warmup, then `sqrt(warmup / t)`.
    RsqrtDecay { warmup_steps: u64 },
    /// Divide by `factor` at each epoch boundary passed, after an optional
    /// linear warmup over `warmup_epochs`.
    Staircase {
        steps_per_epoch: u64,
        boundaries: Vec<u64>,
        factor: f64,
        #[serde(default)]
        warmup_epochs: u64,
    },
}

impl Schedule {
    pub fn parse(json: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(json).map_err(|e| ConfigError(format!("schedule: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(format!("schedule: {m}")));
        match self {
            Schedule::LinearWarmup { steps } | Schedule::QuadraticWarmup { steps } if *steps == 0 => {
                bad("warmup steps must be >= 1")
            }
            Schedule::RsqrtDecay { warmup_steps: 0 } => bad("warmup_steps must be >= 1"),
            Schedule::Staircase {
                steps_per_epoch, factor, ..
            } if *steps_per_epoch == 0 || !(*factor >= 1.0) => bad("staircase needs steps_per_epoch >= 1 and factor >= 1"),
            _ => Ok(()),
        }
    }

    /// Multiplier in `(0, 1]` at 1-based step `t`.
    pub fn multiplier(&self, t: u64) -> f64 {
        let t = t.max(1);
        match self {
            Schedule::Constant => 1.0,
            Schedule::LinearWarmup { steps } => (t as f64 / *steps as f64).min(1.0),
            Schedule::QuadraticWarmup { steps } => (t as f64 / *steps as f64).min(1.0).powi(2),
            Schedule::RsqrtDecay { warmup_steps } => {
                let w = *warmup_steps as f64;
                if (t as f64) < w {
                    t as f64 / w
                } else {
                    (w / t as f64).sqrt()
                }
            }
            Schedule::Staircase {
                steps_per_epoch,
                boundaries,
                factor,
                warmup_epochs,
            } => {
                let epoch = (t - 1) / steps_per_epoch;
                let drops = boundaries.iter().filter(|&&b| epoch >= b).count();
                let warm_steps = warmup_epochs * steps_per_epoch;
                let warm = if t < warm_steps {
                    t as f64 / warm_steps as f64
                } else {
                    1.0
                };
                warm * factor.powi(-(drops as i32))
            }
        }
    }
}
