//! Deterministic training loop and its outputs.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use shampoo::linalg::Matrix;
use shampoo::root::RootDiagnostics;
use shampoo::scheduler::{default_computer, RootComputer, RootJob, SchedulerEvent};
use shampoo::{AdaGrad, Adam, Optimizer, Schedule, SchedulerMode, SgdMomentum, Shampoo, ShampooConfig};

use crate::problems::{Problem, ProblemConfig};
use crate::HarnessError;

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e10;

pub const METRICS_CSV_HEADER: &str = "step,wall_ms,stats_ms,precond_grad_ms,root_adopt_events,train_loss,eval_loss,eta_t_mean,staleness_mean,sign_flip_fraction_mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Shampoo(ShampooConfig),
    Adagrad {
        eta: f64,
        #[serde(default)]
        beta1: f64,
    },
    Adam {
        eta: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        eta: f64,
        #[serde(default)]
        beta1: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Shampoo(_) => "shampoo",
            OptimizerConfig::Adagrad { .. } => "adagrad",
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::Sgd { .. } => "sgd",
        }
    }

    /// Copy with the base learning rate replaced.
    pub fn with_eta(&self, eta: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            OptimizerConfig::Shampoo(c) => c.eta0 = eta,
            OptimizerConfig::Adagrad { eta: e, .. }
            | OptimizerConfig::Adam { eta: e, .. }
            | OptimizerConfig::Sgd { eta: e, .. } => *e = eta,
        }
        out
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let eta = match self {
            OptimizerConfig::Shampoo(c) => return c.validate().map_err(|e| HarnessError::Config(e.to_string())),
            OptimizerConfig::Adagrad { eta, beta1 } | OptimizerConfig::Sgd { eta, beta1, .. } => {
                if !(0.0..1.0).contains(beta1) {
                    return Err(HarnessError::Config("beta1 must lie in [0, 1)".into()));
                }
                *eta
            }
            OptimizerConfig::Adam { eta, beta1, beta2, eps } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*eps > 0.0) {
                    return Err(HarnessError::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
                }
                *eta
            }
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(HarnessError::Config("eta must be positive".into()));
        }
        Ok(())
    }
}

/// Stand-in root worker for latency experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubWorker {
    /// Sleep before answering.
    pub sleep_ms: u64,
}

impl StubWorker {
    /// Answers every job with the identity after sleeping.
    pub fn computer(self) -> RootComputer {
        let sleep = Duration::from_millis(self.sleep_ms);
        Arc::new(move |job: &RootJob| {
            if !sleep.is_zero() {
                std::thread::sleep(sleep);
            }
            Ok((
                Matrix::identity(job.snapshot.rows()),
                RootDiagnostics {
                    iterations: 0,
                    residual: 0.0,
                    lambda_max_estimate: 1.0,
                    ridge: 0.0,
                    condition_estimate: 1.0,
                    converged: true,
                },
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    pub steps: u64,
    /// Minibatch size; zero uses the full data set.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub scheduler: SchedulerMode,
    /// Standard deviation of Gaussian noise added to every gradient entry.
    #[serde(default)]
    pub grad_noise: f64,
    /// Losses for which the summary reports the first step reaching them.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Write a metrics row every this many steps (and at the last step).
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// `false` writes zeros in the timing columns so that metrics files of
    /// repeated runs compare byte for byte.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    /// Replace the root solver by a sleeping identity stub.
    #[serde(default)]
    pub stub_worker: Option<StubWorker>,
}

fn default_mode() -> SchedulerMode {
    SchedulerMode::SyncDelayed { delay_steps: 0 }
}

fn default_log_every() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(problem: ProblemConfig, optimizer: OptimizerConfig, steps: u64) -> Self {
        Self {
            problem,
            optimizer,
            schedule: Schedule::Constant,
            steps,
            batch_size: 0,
            seed: 0,
            scheduler: default_mode(),
            grad_noise: 0.0,
            thresholds: Vec::new(),
            log_every: 1,
            record_timing: true,
            stub_worker: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.optimizer.validate()?;
        self.schedule.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.log_every == 0 {
            return Err(HarnessError::Config("log_every must be >= 1".into()));
        }
        if !(self.grad_noise >= 0.0) {
            return Err(HarnessError::Config("grad_noise must be >= 0".into()));
        }
        if let SchedulerMode::Async { workers: 0 } = self.scheduler {
            return Err(HarnessError::Config("async mode needs at least one worker".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_ms: f64,
    pub stats_ms: f64,
    pub precond_grad_ms: f64,
    pub root_adopt_events: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eta_t_mean: f64,
    pub staleness_mean: f64,
    pub sign_flip_fraction_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub optimizer: String,
    pub steps_run: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_eval_loss: f64,
    /// Smallest training loss seen.
    pub best_loss: f64,
    pub diverged_at: Option<u64>,
    /// Threshold (as printed) to the first step whose loss is at or below it.
    pub steps_to_threshold: BTreeMap<String, Option<u64>>,
    pub mean_step_ms: f64,
}

impl Summary {
    pub fn steps_to(&self, threshold: f64) -> Option<u64> {
        self.steps_to_threshold.get(&threshold_key(threshold)).copied().flatten()
    }
}

pub fn threshold_key(threshold: f64) -> String {
    format!("{threshold:e}")
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub events: Vec<SchedulerEvent>,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_CSV_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn build_optimizer(cfg: &RunConfig, shapes: &[Vec<usize>]) -> Result<Box<dyn Optimizer>, HarnessError> {
    Ok(match &cfg.optimizer {
        OptimizerConfig::Shampoo(c) => {
            let computer = cfg.stub_worker.map_or_else(default_computer, StubWorker::computer);
            Box::new(Shampoo::with_computer(shapes, c.clone(), cfg.scheduler, computer)?)
        }
        OptimizerConfig::Adagrad { eta, beta1 } => Box::new(AdaGrad::new(shapes, *eta, *beta1)),
        OptimizerConfig::Adam { eta, beta1, beta2, eps } => Box::new(Adam::new(shapes, *eta, *beta1, *beta2, *eps)),
        OptimizerConfig::Sgd {
            eta,
            beta1,
            weight_decay,
        } => Box::new(SgdMomentum::new(shapes, *eta, *beta1, *weight_decay)),
    })
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

/// Runs one configuration to completion or divergence.
///
/// Step `t` evaluates the loss at the current parameters, then applies the
/// update computed from that point's gradient.
pub fn train(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.seed)?;
    train_problem(cfg, problem.as_ref())
}

pub fn train_problem(cfg: &RunConfig, problem: &dyn Problem) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let shapes = problem.shapes();
    let mut opt = build_optimizer(cfg, &shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e));
    let mut params = problem.init(&mut rng);

    let initial_loss = problem.loss(&params, None);
    let mut summary = Summary {
        problem: problem.name().to_string(),
        optimizer: opt.name().to_string(),
        steps_run: 0,
        initial_loss,
        final_loss: initial_loss,
        final_eval_loss: problem.eval_loss(&params),
        best_loss: initial_loss,
        diverged_at: None,
        steps_to_threshold: cfg.thresholds.iter().map(|&t| (threshold_key(t), None)).collect(),
        mean_step_ms: 0.0,
    };
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut total_ms = 0.0;
    let n = problem.n_samples();
    let use_batches = cfg.batch_size > 0 && n > 0;

    for t in 1..=cfg.steps {
        let start = Instant::now();
        let batch: Option<Vec<usize>> = use_batches.then(|| (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect());
        let loss = problem.loss(&params, batch.as_deref());
        if diverged(loss) {
            summary.diverged_at = Some(t);
            summary.final_loss = loss;
            break;
        }
        summary.best_loss = summary.best_loss.min(loss);
        for (key, slot) in summary.steps_to_threshold.iter_mut() {
            let threshold: f64 = key.parse().expect("keys are formatted floats");
            if slot.is_none() && loss <= threshold {
                // counted in updates applied before reaching it
                *slot = Some(t - 1);
            }
        }
        let mut grads = problem.gradient(&params, batch.as_deref());
        if cfg.grad_noise > 0.0 {
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v += cfg.grad_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let lr_scale = cfg.schedule.multiplier(t);
        let report = opt.step(t, lr_scale, &mut params, &grads).map_err(|e| HarnessError::Numerical(e.to_string()))?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        total_ms += wall_ms;
        summary.steps_run = t;
        events.extend(opt.take_events());

        if t % cfg.log_every == 0 || t == cfg.steps {
            let timing = |v: f64| if cfg.record_timing { v } else { 0.0 };
            rows.push(MetricsRow {
                step: t,
                wall_ms: timing(wall_ms),
                stats_ms: timing(report.stats_ms),
                precond_grad_ms: timing(report.precond_ms),
                root_adopt_events: report.adoptions.len(),
                train_loss: loss,
                eval_loss: problem.eval_loss(&params),
                eta_t_mean: report.eta_mean,
                staleness_mean: report.staleness_mean,
                sign_flip_fraction_mean: report.sign_flip_mean,
            });
        }
    }
    opt.finish();
    events.extend(opt.take_events());

    if summary.diverged_at.is_none() {
        summary.final_loss = problem.loss(&params, None);
        if diverged(summary.final_loss) {
            summary.diverged_at = Some(summary.steps_run);
        } else {
            summary.best_loss = summary.best_loss.min(summary.final_loss);
            let steps_run = summary.steps_run;
            for (key, slot) in summary.steps_to_threshold.iter_mut() {
                let threshold: f64 = key.parse().expect("keys are formatted floats");
                if slot.is_none() && summary.final_loss <= threshold {
                    *slot = Some(steps_run);
                }
            }
        }
        summary.final_eval_loss = problem.eval_loss(&params);
    }
    if summary.steps_run > 0 {
        summary.mean_step_ms = if cfg.record_timing {
            total_ms / summary.steps_run as f64
        } else {
            0.0
        };
    }
    Ok(RunOutput { rows, summary, events })
}
