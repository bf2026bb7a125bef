//! Condition numbers of the preconditioner statistics along a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use shampoo::root::condition_number;
use shampoo::{Optimizer, Shampoo};

use crate::train::{OptimizerConfig, RunConfig};
use crate::HarnessError;

pub const CONDITION_CSV_HEADER: &str = "step,tensor_id,side,condition";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionRow {
    pub step: u64,
    /// Index of the preconditioned block.
    pub tensor_id: usize,
    pub side: &'static str,
    pub condition: f64,
}

/// Trains with Shampoo and records `λmax/λmin` of every statistic each
/// `every` steps. Requires a Shampoo optimizer config.
pub fn trace_condition(cfg: &RunConfig, every: u64) -> Result<Vec<ConditionRow>, HarnessError> {
    cfg.validate()?;
    let OptimizerConfig::Shampoo(scfg) = &cfg.optimizer else {
        return Err(HarnessError::Config("trace-condition needs a shampoo optimizer".into()));
    };
    if every == 0 {
        return Err(HarnessError::Config("every must be >= 1".into()));
    }
    let problem = cfg.problem.build(cfg.seed)?;
    let mut opt = Shampoo::new(&problem.shapes(), scfg.clone(), cfg.scheduler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = problem.init(&mut rng);
    let mut rows = Vec::new();
    for t in 1..=cfg.steps {
        let grads = problem.gradient(&params, None);
        opt.step(t, cfg.schedule.multiplier(t), &mut params, &grads)?;
        if t % every != 0 {
            continue;
        }
        for (id, state) in opt.states().iter().enumerate() {
            for side in state.sides() {
                let stats = &state.factor(side).expect("listed side").stats;
                let condition = condition_number(stats).map_err(|e| HarnessError::Numerical(e.to_string()))?;
                rows.push(ConditionRow {
                    step: t,
                    tensor_id: id,
                    side: side.name(),
                    condition,
                });
            }
        }
    }
    opt.finish();
    Ok(rows)
}

pub fn condition_csv(rows: &[ConditionRow]) -> String {
    let mut out = format!("{CONDITION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:e}\n", r.step, r.tensor_id, r.side, r.condition));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ProblemConfig;
    use shampoo::ShampooConfig;

    #[test]
    fn records_both_sides_at_each_interval() {
        let problem = ProblemConfig::Quadratic {
            m: 4,
            n: 3,
            cond: 100.0,
            left_diagonal: false,
            left_cond: None,
        };
        let cfg = RunConfig::new(problem, OptimizerConfig::Shampoo(ShampooConfig { kappa: 5, tau: 5, ..Default::default() }), 20);
        let rows = trace_condition(&cfg, 10).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.condition >= 1.0));
    }

    #[test]
    fn baseline_optimizer_is_rejected() {
        let problem = ProblemConfig::Quadratic {
            m: 2,
            n: 2,
            cond: 1.0,
            left_diagonal: false,
            left_cond: None,
        };
        let cfg = RunConfig::new(problem, OptimizerConfig::Adagrad { eta: 0.1, beta1: 0.0 }, 5);
        assert!(matches!(trace_condition(&cfg, 1), Err(HarnessError::Config(_))));
    }
}
