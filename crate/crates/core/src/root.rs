//! Inverse p-th roots of symmetric PSD statistics by the coupled Newton
//! iteration, run in double precision.
//!
//! For `Â = A + ridge·I` with `c ≥ λmax(Â)`, start from `M₀ = Â/c`,
//! `X₀ = c^(-1/p)·I` and iterate
//!
//! ```text
//! T_k     = ((p + 1)·I − M_k) / p
//! X_{k+1} = X_k·T_k
//! M_{k+1} = T_k^p·M_k
//! ```
//!
//! `M_k = X_k^p·Â` throughout, so `M_k → I` forces `X_k → Â^(-1/p)`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cholesky_succeeds, mat_power_oracle, sym_eig, LinalgError, Matrix};

const POWER_ITERATIONS: usize = 100;
const POWER_SEED: u64 = 0x5eed_0f_2007;
const LAMBDA_INFLATION: f64 = 1.0 + 1e-6;
/// Inputs whose smallest eigenvalue falls below `-PSD_TOL·λmax` are rejected.
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("input is not positive semidefinite (λmax estimate {lambda_max:e})")]
    NotPsd { lambda_max: f64 },
    #[error("invalid root config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RootConfig {
    /// Root order; `X ≈ Â^(-1/p)`.
    pub p: u32,
    /// Ridge relative to the estimated largest eigenvalue.
    pub ridge_rel: f64,
    /// Absolute ridge added on top of the relative one.
    pub ridge_abs: f64,
    /// Stop once `max|M_k − I| ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RootConfig {
    fn default() -> Self {
        Self {
            p: 4,
            ridge_rel: 1e-6,
            ridge_abs: 0.0,
            tol: 1e-7,
            max_iter: 100,
        }
    }
}

impl RootConfig {
    pub fn with_p(self, p: u32) -> Self {
        Self { p, ..self }
    }

    pub fn validate(&self) -> Result<(), RootError> {
        if self.p < 1 {
            return Err(RootError::InvalidConfig("p must be >= 1".into()));
        }
        if !(self.ridge_rel >= 0.0 && self.ridge_abs >= 0.0) {
            return Err(RootError::InvalidConfig("ridge must be >= 0".into()));
        }
        if !(self.tol > 0.0) {
            return Err(RootError::InvalidConfig("tol must be > 0".into()));
        }
        if self.max_iter < 1 {
            return Err(RootError::InvalidConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootDiagnostics {
    pub iterations: usize,
    /// `max|X^p·Â − I|` for the returned `X`, as tracked by the iteration.
    pub residual: f64,
    /// Power-iteration estimate of `λmax(A)` (before the ridge).
    pub lambda_max_estimate: f64,
    /// Ridge actually added: `Â = A + ridge·I`.
    pub ridge: f64,
    /// `λmax(Â)/λmin(Â)`, with `λmin` recovered from the returned root.
    pub condition_estimate: f64,
    pub converged: bool,
}

/// Largest eigenvalue estimate of a symmetric matrix by power iteration
/// (fixed iteration count, fixed start vector).
pub fn power_iteration(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    for _ in 0..POWER_ITERATIONS {
        matvec(a, &v, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    matvec(a, &v, &mut w);
    v.iter().zip(&w).map(|(x, y)| x * y).sum()
}

fn matvec(a: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.row(i).iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// `x^k` for `k ≥ 1` by binary powering.
pub fn int_power(x: &Matrix, k: u32) -> Matrix {
    assert!(k >= 1);
    let mut result: Option<Matrix> = None;
    let mut base = x.clone();
    let mut e = k;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => r.matmul(&base).expect("square"),
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = base.matmul(&base).expect("square");
    }
    result.expect("k >= 1")
}

fn max_dev_from_identity(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for (j, &x) in m.row(i).iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((x - target).abs());
        }
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

/// Computes `X ≈ (A + ridge·I)^(-1/p)`.
///
/// The ridge is `cfg.ridge_rel·λ̂max(A) + cfg.ridge_abs`. Once the stopping
/// test passes, one further Newton step is taken; in the quadratic regime it
/// squares the error at the cost of a single iteration.
///
/// Non-convergence is not an error: the best iterate is returned with
/// `converged = false`.
pub fn inverse_pth_root(a: &Matrix, cfg: &RootConfig) -> Result<(Matrix, RootDiagnostics), RootError> {
    cfg.validate()?;
    a.ensure_finite()?;
    let a = a.symmetrized()?;
    let n = a.rows();
    if n == 0 {
        return Err(RootError::InvalidConfig("empty matrix".into()));
    }
    let p = cfg.p;

    let lambda_max = power_iteration(&a);
    if a.max_abs() > 0.0 {
        let mut shifted = a.clone();
        shifted.add_diagonal(PSD_TOL * lambda_max.abs());
        if lambda_max <= 0.0 || !cholesky_succeeds(&shifted) {
            return Err(RootError::NotPsd { lambda_max });
        }
    }
    let ridge = cfg.ridge_rel * lambda_max + cfg.ridge_abs;
    let top = lambda_max + ridge;
    if !(top > 0.0) {
        return Err(LinalgError::Singular("zero matrix with zero ridge".into()).into());
    }
    let scale = top * LAMBDA_INFLATION;

    let mut m = a.scale(1.0 / scale);
    m.add_diagonal(ridge / scale);
    let mut x = Matrix::scaled_identity(n, scale.powf(-1.0 / p as f64));

    let pf = p as f64;
    let mut err = max_dev_from_identity(&m);
    let mut best = (err, x.clone());
    let mut iterations = 0;
    let mut converged = false;
    let mut polish = false;
    while iterations < cfg.max_iter {
        if err <= cfg.tol {
            if polish {
                converged = true;
                break;
            }
            polish = true;
        }
        // T = ((p+1) I - M) / p
        let mut t = m.scale(-1.0 / pf);
        t.add_diagonal((pf + 1.0) / pf);
        x = x.matmul(&t)?;
        m = int_power(&t, p).matmul(&m)?.symmetrize_unchecked();
        iterations += 1;
        err = max_dev_from_identity(&m);
        if err < best.0 {
            best = (err, x.clone());
        }
        if !err.is_finite() {
            break;
        }
        if polish {
            converged = true;
            break;
        }
    }
    if !converged && err <= cfg.tol {
        converged = true;
    }
    let (residual, x) = if converged { (err, x) } else { best };
    let x = x.symmetrize_unchecked();

    let lambda_min = power_iteration(&x).powf(-pf);
    let condition_estimate = if lambda_min > 0.0 {
        top / lambda_min
    } else {
        f64::INFINITY
    };
    Ok((
        x,
        RootDiagnostics {
            iterations,
            residual,
            lambda_max_estimate: lambda_max,
            ridge,
            condition_estimate,
            converged,
        },
    ))
}

/// `λmax/λmin` from the eigendecomposition; `+∞` when `λmin ≤ 0`.
pub fn condition_number(a: &Matrix) -> Result<f64, LinalgError> {
    let eig = sym_eig(a)?;
    let (lo, hi) = (eig.min(), eig.max());
    Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootMethod {
    CoupledNewton,
    EigOracle,
}

impl RootMethod {
    pub fn name(self) -> &'static str {
        match self {
            RootMethod::CoupledNewton => "coupled_newton",
            RootMethod::EigOracle => "eig_oracle",
        }
    }
}

impl std::str::FromStr for RootMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coupled_newton" => Ok(RootMethod::CoupledNewton),
            "eig_oracle" => Ok(RootMethod::EigOracle),
            other => Err(format!("unknown root method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub seed: u64,
    /// Condition number of the generated inputs.
    pub cond: f64,
    pub root: RootConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cond: 1e4,
            root: RootConfig {
                ridge_rel: 0.0,
                tol: 1e-10,
                ..RootConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: RootMethod,
    pub n: usize,
    pub ms: f64,
    /// `max|X^p·Â − I|`
    pub residual: f64,
}

pub const BENCH_CSV_HEADER: &str = "method,n,ms,residual";

/// Times each method on seeded random PSD inputs of each size.
pub fn bench_root(sizes: &[usize], methods: &[RootMethod], cfg: &BenchConfig) -> Result<Vec<BenchRow>, RootError> {
    let mut rows = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9e37_79b9));
        let a = linalg::random::psd_with_condition(n, cfg.cond, &mut rng);
        for &method in methods {
            let start = Instant::now();
            let (x, a_hat) = match method {
                RootMethod::CoupledNewton => {
                    let (x, diag) = inverse_pth_root(&a, &cfg.root)?;
                    let mut a_hat = a.clone();
                    a_hat.add_diagonal(diag.ridge);
                    (x, a_hat)
                }
                RootMethod::EigOracle => {
                    let ridge = cfg.root.ridge_rel * power_iteration(&a) + cfg.root.ridge_abs;
                    let mut a_hat = a.clone();
                    a_hat.add_diagonal(ridge);
                    (mat_power_oracle(&a_hat, -1.0 / cfg.root.p as f64)?, a_hat)
                }
            };
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let residual = max_dev_from_identity(&int_power(&x, cfg.root.p).matmul(&a_hat)?);
            rows.push(BenchRow { method, n, ms, residual });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:.3},{:e}\n", r.method.name(), r.n, r.ms, r.residual));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random, relative_error};

    #[test]
    fn identity_is_a_fixed_point() {
        let (x, diag) = inverse_pth_root(&Matrix::identity(5), &RootConfig::default()).unwrap();
        assert!(diag.converged);
        assert!(diag.iterations <= 2, "{diag:?}");
        assert!(relative_error(&x, &Matrix::identity(5)).unwrap() < 1e-6);
    }

    #[test]
    fn scalar_roots_without_ridge() {
        let cfg = RootConfig {
            ridge_rel: 0.0,
            ..RootConfig::default()
        };
        let (x, diag) = inverse_pth_root(&Matrix::from_diag(&[16.0, 81.0]), &cfg).unwrap();
        assert!(diag.converged);
        assert!((x.get(0, 0) - 0.5).abs() < 1e-10, "{x:?}");
        assert!((x.get(1, 1) - 1.0 / 3.0).abs() < 1e-10);
        assert!(x.get(0, 1).abs() < 1e-10);
    }

    #[test]
    fn rejects_indefinite_input() {
        let a = Matrix::from_diag(&[1.0, -1e-3]);
        assert!(matches!(
            inverse_pth_root(&a, &RootConfig::default()),
            Err(RootError::NotPsd { .. })
        ));
    }

    #[test]
    fn tolerates_tiny_negative_eigenvalues() {
        let a = Matrix::from_diag(&[1.0, -1e-13]);
        assert!(inverse_pth_root(&a, &RootConfig::default()).is_ok());
    }

    #[test]
    fn rejects_asymmetric_and_bad_config() {
        let a = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(
            inverse_pth_root(&a, &RootConfig::default()),
            Err(RootError::Linalg(LinalgError::NotSymmetric(_)))
        ));
        let cfg = RootConfig {
            max_iter: 0,
            ..RootConfig::default()
        };
        assert!(matches!(
            inverse_pth_root(&Matrix::identity(2), &cfg),
            Err(RootError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_matrix_needs_a_ridge() {
        let z = Matrix::zeros(3, 3);
        let cfg = RootConfig {
            ridge_abs: 16.0,
            ..RootConfig::default()
        };
        let (x, _) = inverse_pth_root(&z, &cfg).unwrap();
        assert!(relative_error(&x, &Matrix::scaled_identity(3, 0.5)).unwrap() < 1e-10);
        assert!(inverse_pth_root(&z, &RootConfig::default()).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random::psd_with_condition(16, 1e8, &mut rng);
        let cfg = RootConfig {
            ridge_rel: 0.0,
            max_iter: 3,
            ..RootConfig::default()
        };
        let (x, diag) = inverse_pth_root(&a, &cfg).unwrap();
        assert!(!diag.converged);
        assert_eq!(diag.iterations, 3);
        assert!(x.is_finite());
    }

    #[test]
    fn general_integer_p() {
        let a = Matrix::from_diag(&[8.0, 27.0]);
        let cfg = RootConfig {
            p: 3,
            ridge_rel: 0.0,
            ..RootConfig::default()
        };
        let (x, _) = inverse_pth_root(&a, &cfg).unwrap();
        assert!((x.get(0, 0) - 0.5).abs() < 1e-10);
        assert!((x.get(1, 1) - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn condition_number_examples() {
        assert_eq!(condition_number(&Matrix::identity(4)).unwrap(), 1.0);
        let c = condition_number(&Matrix::from_diag(&[1.0, 1e10])).unwrap();
        assert!((c / 1e10 - 1.0).abs() < 1e-12);
        assert_eq!(condition_number(&Matrix::from_diag(&[0.0, 1.0])).unwrap(), f64::INFINITY);
        assert!(condition_number(&Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]])).is_err());
    }

    #[test]
    fn int_power_matches_repeated_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random::symmetric(5, &mut rng).scale(0.3);
        let mut naive = a.clone();
        for _ in 1..7 {
            naive = naive.matmul(&a).unwrap();
        }
        assert!(relative_error(&int_power(&a, 7), &naive).unwrap() < 1e-13);
    }

    #[test]
    fn bench_empty_sizes() {
        let rows = bench_root(&[], &[RootMethod::CoupledNewton], &BenchConfig::default()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(bench_csv(&rows), "method,n,ms,residual\n");
    }
}
