//! Multi-tensor optimizers behind one interface: Shampoo with blocking and
//! a root scheduler, and the diagonal baselines.

use std::time::Instant;

use crate::config::ShampooConfig;
use crate::linalg::Matrix;
use crate::optimizer::{adagrad_step, adam_step, sgd_momentum_step, shampoo_step, StepError};
use crate::partition::{matricize, plan_partition, PartitionPlan};
use crate::scheduler::{AdoptionEvent, RootComputer, Scheduler, SchedulerEvent, SchedulerMode};
use crate::state::PreconditionerState;

/// Per-step measurements, averaged over blocks where noted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub stats_ms: f64,
    pub precond_ms: f64,
    pub adoptions: Vec<AdoptionEvent>,
    pub eta_mean: f64,
    /// Mean over blocks with roots of `t - snapshot_step`.
    pub staleness_mean: f64,
    pub sign_flip_mean: f64,
}

pub trait Optimizer {
    fn name(&self) -> &str;

    /// Applies one update in place. `params[i]` and `grads[i]` are the
    /// matricized views of tensor `i`; `t` is 1-based.
    fn step(&mut self, t: u64, lr_scale: f64, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, StepError>;

    /// Scheduler events recorded since the last call.
    fn take_events(&mut self) -> Vec<SchedulerEvent> {
        Vec::new()
    }

    /// Blocks until background work has finished.
    fn finish(&mut self) {}
}

fn check_shapes(expected: &[(usize, usize)], params: &[Matrix], grads: &[Matrix]) -> Result<(), StepError> {
    if params.len() != expected.len() || grads.len() != expected.len() {
        return Err(StepError::TensorCount {
            expected: expected.len(),
            got: params.len().min(grads.len()),
        });
    }
    for ((&shape, p), g) in expected.iter().zip(params).zip(grads) {
        for got in [p.shape(), g.shape()] {
            if got != shape {
                return Err(crate::state::StateError::ShapeMismatch { expected: shape, got }.into());
            }
        }
    }
    Ok(())
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub struct Shampoo {
    cfg: ShampooConfig,
    plans: Vec<PartitionPlan>,
    /// `(tensor, block)` for each entry of `states`.
    owners: Vec<(usize, usize)>,
    states: Vec<PreconditionerState>,
    scheduler: Scheduler,
}

impl Shampoo {
    pub fn new(shapes: &[Vec<usize>], cfg: ShampooConfig, mode: SchedulerMode) -> Result<Self, StepError> {
        let scheduler = Scheduler::new(mode, &cfg);
        Self::build(shapes, cfg, scheduler)
    }

    pub fn with_computer(
        shapes: &[Vec<usize>],
        cfg: ShampooConfig,
        mode: SchedulerMode,
        computer: RootComputer,
    ) -> Result<Self, StepError> {
        let scheduler = Scheduler::with_computer(mode, &cfg, computer);
        Self::build(shapes, cfg, scheduler)
    }

    fn build(shapes: &[Vec<usize>], cfg: ShampooConfig, scheduler: Scheduler) -> Result<Self, StepError> {
        cfg.validate()?;
        let plans: Vec<_> = shapes.iter().map(|s| plan_partition(s, &cfg)).collect();
        let mut owners = Vec::new();
        let mut states = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            for (j, block) in plan.blocks.iter().enumerate() {
                let (r, c) = block.shape();
                owners.push((i, j));
                states.push(PreconditionerState::new(
                    r,
                    c,
                    plan.left_exponent(),
                    plan.right_exponent(),
                    cfg.eps_stat,
                ));
            }
        }
        Ok(Self {
            cfg,
            plans,
            owners,
            states,
            scheduler,
        })
    }

    pub fn config(&self) -> &ShampooConfig {
        &self.cfg
    }

    pub fn plans(&self) -> &[PartitionPlan] {
        &self.plans
    }

    pub fn states(&self) -> &[PreconditionerState] {
        &self.states
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.plans.iter().map(|p| p.shape).collect()
    }
}

impl Optimizer for Shampoo {
    fn name(&self) -> &str {
        "shampoo"
    }

    fn step(&mut self, t: u64, lr_scale: f64, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, StepError> {
        check_shapes(&self.shapes(), params, grads)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(StepError::NonFinite("gradient"));
        }
        let start = Instant::now();
        let mut block_grads = Vec::with_capacity(self.states.len());
        for (state, &(i, j)) in self.states.iter_mut().zip(&self.owners) {
            let b = &self.plans[i].blocks[j];
            let mut g = grads[i].block(b.rows.start, b.cols.start, b.rows.len(), b.cols.len());
            if self.cfg.weight_decay != 0.0 {
                let w = params[i].block(b.rows.start, b.cols.start, b.rows.len(), b.cols.len());
                g.axpy(self.cfg.weight_decay, &w)?;
            }
            state.update_statistics(&g, self.cfg.beta2)?;
            state.update_diagonal(&g)?;
            block_grads.push(g);
        }
        let stats_ms = ms_since(start);

        let adoptions = self.scheduler.on_step(t, &mut self.states);

        let start = Instant::now();
        let n = self.states.len().max(1) as f64;
        let (mut eta_sum, mut flip_sum, mut stale_sum, mut stale_count) = (0.0, 0.0, 0.0, 0usize);
        for ((state, &(i, j)), g) in self.states.iter_mut().zip(&self.owners).zip(&block_grads) {
            let (delta, rep) = shampoo_step(state, g, t, &self.cfg, lr_scale)?;
            let b = &self.plans[i].blocks[j];
            let mut w = params[i].block(b.rows.start, b.cols.start, b.rows.len(), b.cols.len());
            for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                *x += d;
            }
            params[i].set_block(b.rows.start, b.cols.start, &w);
            eta_sum += rep.eta_t;
            flip_sum += rep.sign_flip_fraction;
            if let Some(r) = state.root_step {
                stale_sum += t.saturating_sub(r) as f64;
                stale_count += 1;
            }
        }
        Ok(StepReport {
            stats_ms,
            precond_ms: ms_since(start),
            adoptions,
            eta_mean: eta_sum / n,
            staleness_mean: if stale_count > 0 {
                stale_sum / stale_count as f64
            } else {
                0.0
            },
            sign_flip_mean: flip_sum / n,
        })
    }

    fn take_events(&mut self) -> Vec<SchedulerEvent> {
        self.scheduler.take_events()
    }

    fn finish(&mut self) {
        self.scheduler.drain();
    }
}

/// Diagonal AdaGrad with momentum; `D` is a plain running sum.
pub struct AdaGrad {
    pub eta: f64,
    pub beta1: f64,
    pub floor: f64,
    shapes: Vec<(usize, usize)>,
    accum: Vec<Matrix>,
    momentum: Vec<Matrix>,
}

impl AdaGrad {
    pub fn new(shapes: &[Vec<usize>], eta: f64, beta1: f64) -> Self {
        let shapes: Vec<_> = shapes.iter().map(|s| matricize(s)).collect();
        Self {
            eta,
            beta1,
            floor: ShampooConfig::default().diag_floor,
            accum: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            momentum: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            shapes,
        }
    }
}

impl Optimizer for AdaGrad {
    fn name(&self) -> &str {
        "adagrad"
    }

    fn step(&mut self, _t: u64, lr_scale: f64, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, StepError> {
        check_shapes(&self.shapes, params, grads)?;
        let start = Instant::now();
        for i in 0..grads.len() {
            for (d, x) in self.accum[i].data_mut().iter_mut().zip(grads[i].data()) {
                *d += x * x;
            }
            let delta = adagrad_step(
                &self.accum[i],
                &mut self.momentum[i],
                &grads[i],
                self.eta * lr_scale,
                self.beta1,
                self.floor,
            )?;
            params[i].axpy(1.0, &delta)?;
        }
        Ok(StepReport {
            precond_ms: ms_since(start),
            eta_mean: self.eta * lr_scale,
            ..StepReport::default()
        })
    }
}

pub struct Adam {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    shapes: Vec<(usize, usize)>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>], eta: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<_> = shapes.iter().map(|s| matricize(s)).collect();
        Self {
            eta,
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            shapes,
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &str {
        "adam"
    }

    fn step(&mut self, t: u64, lr_scale: f64, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, StepError> {
        check_shapes(&self.shapes, params, grads)?;
        let start = Instant::now();
        let eta = self.eta * lr_scale;
        for i in 0..grads.len() {
            let delta = adam_step(&mut self.m[i], &mut self.v[i], &grads[i], t, eta, self.beta1, self.beta2, self.eps)?;
            params[i].axpy(1.0, &delta)?;
        }
        Ok(StepReport {
            precond_ms: ms_since(start),
            eta_mean: eta,
            ..StepReport::default()
        })
    }
}

pub struct SgdMomentum {
    pub eta: f64,
    pub beta1: f64,
    pub weight_decay: f64,
    shapes: Vec<(usize, usize)>,
    velocity: Vec<Matrix>,
}

impl SgdMomentum {
    pub fn new(shapes: &[Vec<usize>], eta: f64, beta1: f64, weight_decay: f64) -> Self {
        let shapes: Vec<_> = shapes.iter().map(|s| matricize(s)).collect();
        Self {
            eta,
            beta1,
            weight_decay,
            velocity: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            shapes,
        }
    }
}

impl Optimizer for SgdMomentum {
    fn name(&self) -> &str {
        "sgd"
    }

    fn step(&mut self, _t: u64, lr_scale: f64, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, StepError> {
        check_shapes(&self.shapes, params, grads)?;
        let start = Instant::now();
        let eta = self.eta * lr_scale;
        for i in 0..grads.len() {
            let delta = sgd_momentum_step(&mut self.velocity[i], &grads[i], &params[i], eta, self.beta1, self.weight_decay)?;
            params[i].axpy(1.0, &delta)?;
        }
        Ok(StepReport {
            precond_ms: ms_since(start),
            eta_mean: eta,
            ..StepReport::default()
        })
    }
}
