use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shampoo::linalg::{gemm, mat_power_oracle, random, relative_error, sym_eig, Matrix};
use shampoo::root::{bench_root, condition_number, inverse_pth_root, BenchConfig, RootConfig, RootMethod};

fn ridged(a: &Matrix, ridge: f64) -> Matrix {
    let mut out = a.clone();
    out.add_diagonal(ridge);
    out
}

#[test]
fn ill_conditioned_64_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let a = random::psd_with_condition(64, 1e8, &mut rng);
    let cfg = RootConfig::default();
    let (x, diag) = inverse_pth_root(&a, &cfg).unwrap();
    assert!(diag.converged);
    assert!(diag.residual <= 10.0 * cfg.tol);
    let oracle = mat_power_oracle(&ridged(&a, diag.ridge), -0.25).unwrap();
    let err = relative_error(&x, &oracle).unwrap();
    assert!(err <= 1e-6, "relative error {err:e}");
    assert!(x.asymmetry().unwrap() <= 1e-10);
}

#[test]
fn reconstruction_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &n in &[4, 16, 48] {
        for &p in &[2u32, 4, 8] {
            for &cond in &[1e2, 1e6] {
                let a = random::psd_with_condition(n, cond, &mut rng);
                let (x, diag) = inverse_pth_root(&a, &RootConfig::default().with_p(p)).unwrap();
                let a_hat = ridged(&a, diag.ridge);
                let back = mat_power_oracle(&x, -(p as f64)).unwrap();
                let err = relative_error(&back, &a_hat).unwrap();
                assert!(err <= 1e-5, "n={n} p={p} cond={cond:e}: {err:e}");
            }
        }
    }
}

#[test]
fn scale_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random::psd_with_condition(24, 1e4, &mut rng);
    let cfg = RootConfig::default();
    let (x1, _) = inverse_pth_root(&a, &cfg).unwrap();
    for &s in &[1e-3, 1.0, 1e3] {
        let (xs, _) = inverse_pth_root(&a.scale(s), &cfg).unwrap();
        let expected = x1.scale(s.powf(-0.25));
        let err = relative_error(&xs, &expected).unwrap();
        assert!(err <= 1e-8, "s={s:e}: {err:e}");
    }
}

#[test]
fn larger_ridge_never_worsens_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random::psd_with_condition(20, 1e9, &mut rng);
    let lmax = sym_eig(&a).unwrap().max();
    let mut prev = f64::INFINITY;
    for &r in &[0.0, 1e-9, 1e-7, 1e-6, 1e-4, 1e-2, 1.0] {
        let c = condition_number(&ridged(&a, r * lmax)).unwrap();
        assert!(c <= prev * (1.0 + 1e-9), "ridge {r:e}: {c:e} > {prev:e}");
        prev = c;
    }
}

#[test]
fn bit_identical_on_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random::psd_with_condition(32, 1e6, &mut rng);
    let cfg = RootConfig::default();
    let (x1, d1) = inverse_pth_root(&a, &cfg).unwrap();
    let (x2, d2) = inverse_pth_root(&a, &cfg).unwrap();
    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x1), bits(&x2));
    assert_eq!(d1, d2);
}

#[test]
fn condition_of_accumulated_statistics() {
    // While L_t is rank deficient its smallest eigenvalue stays at eps, so
    // the ratio can only grow; past full rank it may fall again.
    let (n, eps) = (12, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut l = Matrix::scaled_identity(n, eps);
    let mut prev = 1.0;
    for t in 1..=1000 {
        let g = random::gaussian(n, 1, &mut rng);
        l = l.add(&gemm(&g, false, &g, true).unwrap()).unwrap();
        let c = condition_number(&l).unwrap();
        let eig = sym_eig(&l).unwrap();
        let ratio = eig.max() / eig.min();
        assert!((c / ratio - 1.0).abs() < 1e-12);
        if t < n {
            assert!(c >= prev, "t={t}: {c:e} < {prev:e}");
        }
        prev = c;
    }
}

#[test]
fn bench_small_residuals() {
    let rows = bench_root(&[16], &[RootMethod::CoupledNewton, RootMethod::EigOracle], &BenchConfig::default()).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.residual <= 1e-9, "{:?}: {:e}", r.method, r.residual);
    }
}

#[test]
fn newton_faster_than_eig_at_512() {
    let rows = bench_root(&[512], &[RootMethod::CoupledNewton, RootMethod::EigOracle], &BenchConfig::default()).unwrap();
    let (newton, eig) = (&rows[0], &rows[1]);
    eprintln!("n=512 newton {:.1} ms, eig {:.1} ms", newton.ms, eig.ms);
    assert!(newton.ms < eig.ms);
}
