use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shampoo::{SchedulerMode, ShampooConfig};
use shampoo_harness::problems::{fd_check, ProblemConfig};
use shampoo_harness::train::{train, OptimizerConfig, RunConfig};

fn mlp(widths: Vec<usize>) -> ProblemConfig {
    ProblemConfig::Mlp { widths, n_samples: 32 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quadratic_gradients_match_differences(seed in 0u64..1000, m in 1usize..8, n in 1usize..8, diag in any::<bool>()) {
        let cfg = ProblemConfig::Quadratic { m, n, cond: 1e3, left_diagonal: diag, left_cond: None };
        let p = cfg.build(seed).unwrap();
        prop_assert!(fd_check(p.as_ref(), seed, 3, 1e-5, 64) <= 1e-5);
    }

    #[test]
    fn mlp_gradients_match_differences(seed in 0u64..1000, hidden in 1usize..6, input in 1usize..5) {
        let p = mlp(vec![input, hidden, 1]).build(seed).unwrap();
        prop_assert!(fd_check(p.as_ref(), seed, 3, 1e-5, 64) <= 1e-5);
    }

    #[test]
    fn quadratic_starts_at_unit_loss(seed in 0u64..1000, m in 1usize..8, n in 1usize..8) {
        let p = ProblemConfig::Quadratic { m, n, cond: 1e2, left_diagonal: false, left_cond: None }
            .build(seed)
            .unwrap();
        let w0 = p.init(&mut ChaCha8Rng::seed_from_u64(0));
        prop_assert!((p.loss(&w0, None) - 1.0).abs() < 1e-12);
        prop_assert_eq!(p.optimum_loss(), Some(0.0));
    }
}

#[test]
fn minibatch_gradient_averages_to_full_batch() {
    let p = ProblemConfig::Logistic {
        dim: 4,
        n_samples: 40,
        separation: 1.0,
    }
    .build(3)
    .unwrap();
    let w = p.init(&mut ChaCha8Rng::seed_from_u64(1));
    let full = p.gradient(&w, None);
    let halves: Vec<usize> = (0..20).collect();
    let rest: Vec<usize> = (20..40).collect();
    let (a, b) = (p.gradient(&w, Some(&halves)), p.gradient(&w, Some(&rest)));
    for i in 0..full.len() {
        for (k, v) in full[i].data().iter().enumerate() {
            let avg = 0.5 * (a[i].data()[k] + b[i].data()[k]);
            assert!((v - avg).abs() < 1e-12);
        }
    }
}

#[test]
fn bad_mlp_widths_are_config_errors() {
    for widths in [vec![3, 1], vec![3, 0, 1], vec![3, 4, 2]] {
        assert!(mlp(widths).build(0).is_err());
    }
}

#[test]
fn shampoo_trains_every_problem() {
    let problems = [
        ProblemConfig::Quadratic {
            m: 8,
            n: 6,
            cond: 1e3,
            left_diagonal: false,
            left_cond: None,
        },
        ProblemConfig::Logistic {
            dim: 5,
            n_samples: 64,
            separation: 2.0,
        },
        mlp(vec![4, 6, 1]),
    ];
    for problem in problems {
        let mut cfg = RunConfig::new(
            problem,
            OptimizerConfig::Shampoo(ShampooConfig {
                eta0: 0.1,
                kappa: 5,
                tau: 5,
                ..ShampooConfig::default()
            }),
            150,
        );
        cfg.scheduler = SchedulerMode::Async { workers: 1 };
        let s = train(&cfg).unwrap().summary;
        assert!(s.diverged_at.is_none());
        assert!(s.best_loss < s.initial_loss, "{}: {} -> {}", s.problem, s.initial_loss, s.best_loss);
    }
}
