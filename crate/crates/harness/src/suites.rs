//! Multi-run experiments. Each suite builds its own configurations, runs
//! them sequentially and reports one row per run.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use shampoo::{SchedulerMode, ShampooConfig};

use crate::problems::ProblemConfig;
use crate::train::{train, OptimizerConfig, RunConfig, RunOutput, StubWorker};
use crate::HarnessError;

/// Gradient noise shared by the sweeps; see the project notes for why the
/// comparisons are made in the stochastic regime.
pub const SUITE_NOISE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    DelaySweep,
    BlockSweep,
    OnesidedAblation,
    LatencyBreakdown,
    LrRange,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 5] = [
        SuiteKind::DelaySweep,
        SuiteKind::BlockSweep,
        SuiteKind::OnesidedAblation,
        SuiteKind::LatencyBreakdown,
        SuiteKind::LrRange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::DelaySweep => "delay_sweep",
            SuiteKind::BlockSweep => "block_sweep",
            SuiteKind::OnesidedAblation => "onesided_ablation",
            SuiteKind::LatencyBreakdown => "latency_breakdown",
            SuiteKind::LrRange => "lr_range",
        }
    }
}

impl FromStr for SuiteKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub label: String,
    /// The swept quantity (delay, block size, learning rate, ...).
    pub value: f64,
    pub optimizer: String,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_to_threshold: Option<u64>,
    pub diverged_at: Option<u64>,
    pub mean_step_ms: f64,
    pub mean_stats_ms: f64,
    pub mean_precond_ms: f64,
}

impl SuiteRow {
    fn from_run(label: impl Into<String>, value: f64, threshold: Option<f64>, out: &RunOutput) -> Self {
        let mean = |f: fn(&crate::train::MetricsRow) -> f64| {
            if out.rows.is_empty() {
                0.0
            } else {
                out.rows.iter().map(f).sum::<f64>() / out.rows.len() as f64
            }
        };
        Self {
            label: label.into(),
            value,
            optimizer: out.summary.optimizer.clone(),
            final_loss: out.summary.final_loss,
            best_loss: out.summary.best_loss,
            steps_to_threshold: threshold.and_then(|t| out.summary.steps_to(t)),
            diverged_at: out.summary.diverged_at,
            mean_step_ms: out.summary.mean_step_ms,
            mean_stats_ms: mean(|r| r.stats_ms),
            mean_precond_ms: mean(|r| r.precond_grad_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<SuiteRow>,
}

pub const SUITE_CSV_HEADER: &str =
    "suite,label,value,optimizer,final_loss,best_loss,steps_to_threshold,diverged_at,mean_step_ms,mean_stats_ms,mean_precond_ms";

impl SuiteReport {
    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<u64>| v.map_or(String::new(), |s| s.to_string());
        let mut out = format!("{SUITE_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{},{},{:.4},{:.4},{:.4}",
                self.suite,
                r.label,
                r.value,
                r.optimizer,
                r.final_loss,
                r.best_loss,
                opt(r.steps_to_threshold),
                opt(r.diverged_at),
                r.mean_step_ms,
                r.mean_stats_ms,
                r.mean_precond_ms
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |s| s.to_string());
        let mut out = format!(
            "## {}\n\n| run | value | optimizer | final loss | best loss | steps to threshold | diverged at | step ms |\n|---|---|---|---|---|---|---|---|\n",
            self.suite
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.4e} | {:.4e} | {} | {} | {:.3} |",
                r.label,
                r.value,
                r.optimizer,
                r.final_loss,
                r.best_loss,
                opt(r.steps_to_threshold),
                opt(r.diverged_at),
                r.mean_step_ms
            );
        }
        out
    }
}

pub fn run_suite(kind: SuiteKind, seed: u64) -> Result<SuiteReport, HarnessError> {
    let rows = match kind {
        SuiteKind::DelaySweep => delay_sweep(seed, &[1, 10, 100, 500, 1000])?,
        SuiteKind::BlockSweep => block_sweep(seed)?,
        SuiteKind::OnesidedAblation => onesided_ablation(seed)?,
        SuiteKind::LatencyBreakdown => latency_breakdown(seed, 1000)?,
        SuiteKind::LrRange => lr_range(seed)?,
    };
    Ok(SuiteReport {
        suite: kind.name().to_string(),
        rows,
    })
}

fn shampoo_base() -> ShampooConfig {
    ShampooConfig {
        eta0: 1.0,
        beta1: 0.9,
        kappa: 10,
        tau: 50,
        ..ShampooConfig::default()
    }
}

fn noisy_run(problem: ProblemConfig, optimizer: OptimizerConfig, steps: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(problem, optimizer, steps);
    cfg.seed = seed;
    cfg.grad_noise = SUITE_NOISE;
    cfg.log_every = 100;
    cfg
}

/// Quadratic whose Hessian has condition `1e4`, split evenly.
pub fn square_quadratic(m: usize, n: usize) -> ProblemConfig {
    ProblemConfig::Quadratic {
        m,
        n,
        cond: 1e4,
        left_diagonal: false,
        left_cond: None,
    }
}

/// Final loss against the delay between submitting a root job and
/// adopting its result, plus a diagonal AdaGrad reference row.
pub fn delay_sweep(seed: u64, delays: &[u64]) -> Result<Vec<SuiteRow>, HarnessError> {
    let problem = square_quadratic(32, 32);
    let mut rows = Vec::new();
    for &d in delays {
        let mut cfg = noisy_run(problem.clone(), OptimizerConfig::Shampoo(shampoo_base()), 3000, seed);
        cfg.scheduler = SchedulerMode::SyncDelayed { delay_steps: d };
        rows.push(SuiteRow::from_run(format!("delay_{d}"), d as f64, None, &train(&cfg)?));
    }
    let cfg = noisy_run(problem, OptimizerConfig::Adagrad { eta: 1.0, beta1: 0.9 }, 3000, seed);
    rows.push(SuiteRow::from_run("adagrad", 0.0, None, &train(&cfg)?));
    Ok(rows)
}

/// Final loss with the 16x64 parameter preconditioned whole, in two and in
/// four column blocks.
pub fn block_sweep(seed: u64) -> Result<Vec<SuiteRow>, HarnessError> {
    let problem = square_quadratic(16, 64);
    let mut rows = Vec::new();
    for (label, bs) in [("full", 64usize), ("half", 32), ("quarter", 16)] {
        let opt = OptimizerConfig::Shampoo(ShampooConfig {
            block_size: bs,
            ..shampoo_base()
        });
        rows.push(SuiteRow::from_run(label, bs as f64, None, &train(&noisy_run(problem.clone(), opt, 3000, seed))?));
    }
    let cfg = noisy_run(problem, OptimizerConfig::Adagrad { eta: 1.0, beta1: 0.9 }, 3000, seed);
    rows.push(SuiteRow::from_run("adagrad", 0.0, None, &train(&cfg)?));
    Ok(rows)
}

pub const ONESIDED_THRESHOLD: f64 = 1e-6;

/// Tall `(4096, 32)` quadratic whose row dimension exceeds the
/// preconditioning limit, so Shampoo keeps only the right factor. Both
/// optimizers are scanned over the same learning-rate grid.
pub fn onesided_ablation(seed: u64) -> Result<Vec<SuiteRow>, HarnessError> {
    let problem = ProblemConfig::Quadratic {
        m: 4096,
        n: 32,
        cond: 1e4,
        left_diagonal: true,
        left_cond: Some(10.0),
    };
    let grid = [0.01, 0.03, 0.1, 0.3, 1.0];
    let mut rows = Vec::new();
    for &eta in &grid {
        let shampoo = OptimizerConfig::Shampoo(ShampooConfig {
            eta0: eta,
            max_precond_dim: 256,
            block_size: 4096,
            ..shampoo_base()
        });
        for (label, opt) in [("right_only", shampoo), ("adagrad", OptimizerConfig::Adagrad { eta, beta1: 0.9 })] {
            let mut cfg = RunConfig::new(problem.clone(), opt, 600);
            cfg.seed = seed;
            cfg.thresholds = vec![ONESIDED_THRESHOLD];
            cfg.log_every = 100;
            rows.push(SuiteRow::from_run(label, eta, Some(ONESIDED_THRESHOLD), &train(&cfg)?));
        }
    }
    Ok(rows)
}

/// Per-step wall time in async mode with instantaneous and with slow stub
/// root workers, next to the real solver and a diagonal baseline. Each
/// configuration is run three times interleaved; rows hold the median.
///
/// The stub runs never leave the grafted branch, so their per-step work is
/// the same whether or not roots have arrived; only the scheduler differs.
pub fn latency_breakdown(seed: u64, slow_ms: u64) -> Result<Vec<SuiteRow>, HarnessError> {
    let problem = square_quadratic(128, 128);
    let shampoo = OptimizerConfig::Shampoo(ShampooConfig { kappa: 20, tau: 20, ..shampoo_base() });
    let stubbed = OptimizerConfig::Shampoo(ShampooConfig {
        kappa: 20,
        tau: u64::MAX,
        ..shampoo_base()
    });
    let async_mode = SchedulerMode::Async { workers: 1 };
    let variants: Vec<(&str, OptimizerConfig, SchedulerMode, Option<StubWorker>)> = vec![
        ("stub_instant", stubbed.clone(), async_mode, Some(StubWorker { sleep_ms: 0 })),
        ("stub_slow", stubbed, async_mode, Some(StubWorker { sleep_ms: slow_ms })),
        ("solver_async", shampoo.clone(), async_mode, None),
        ("solver_sync", shampoo, SchedulerMode::SyncDelayed { delay_steps: 0 }, None),
        ("adagrad", OptimizerConfig::Adagrad { eta: 1.0, beta1: 0.9 }, async_mode, None),
    ];
    let mut runs: Vec<Vec<SuiteRow>> = vec![Vec::new(); variants.len()];
    for _ in 0..3 {
        for (i, (label, opt, mode, stub)) in variants.iter().enumerate() {
            let mut cfg = RunConfig::new(problem.clone(), opt.clone(), 400);
            cfg.seed = seed;
            cfg.scheduler = *mode;
            cfg.stub_worker = *stub;
            let value = stub.map_or(0.0, |s| s.sleep_ms as f64);
            runs[i].push(SuiteRow::from_run(*label, value, None, &train(&cfg)?));
        }
    }
    Ok(runs
        .into_iter()
        .map(|mut r| {
            r.sort_by(|a, b| a.mean_step_ms.total_cmp(&b.mean_step_ms));
            r.swap_remove(1)
        })
        .collect())
}

/// Learning rates scanned upward by factors of ten until divergence.
pub fn lr_range(seed: u64) -> Result<Vec<SuiteRow>, HarnessError> {
    let problem = square_quadratic(32, 32);
    let mut rows = Vec::new();
    for name in ["shampoo", "adagrad"] {
        for k in -2..=6 {
            let eta = 10f64.powi(k);
            let opt = match name {
                "shampoo" => OptimizerConfig::Shampoo(ShampooConfig { eta0: eta, ..shampoo_base() }),
                _ => OptimizerConfig::Adagrad { eta, beta1: 0.9 },
            };
            let mut cfg = RunConfig::new(problem.clone(), opt, 1000);
            cfg.seed = seed;
            cfg.log_every = 100;
            let row = SuiteRow::from_run(name, eta, None, &train(&cfg)?);
            let stop = row.diverged_at.is_some();
            rows.push(row);
            if stop {
                break;
            }
        }
    }
    Ok(rows)
}
