//! Seeded generators for test matrices and synthetic problems.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{gemm, Matrix};

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Symmetric matrix with standard normal entries on and above the diagonal.
pub fn symmetric(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = gaussian(n, n, rng);
    Matrix::from_fn(n, n, |i, j| if i <= j { g.get(i, j) } else { g.get(j, i) })
}

/// Haar-ish orthogonal matrix: Gram-Schmidt (applied twice) on a Gaussian matrix.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = gaussian(n, n, rng);
    // columns of g, orthonormalized, stored as rows of `q` during the sweep
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, a) in v.iter_mut().zip(u) {
                    *x -= d * a;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        q.push(v);
    }
    Matrix::from_fn(n, n, |i, j| q[j][i])
}

/// `Q diag(λ) Qᵀ` for a random orthogonal `Q`.
pub fn with_spectrum(eigenvalues: &[f64], rng: &mut impl Rng) -> Matrix {
    let n = eigenvalues.len();
    let q = orthogonal(n, rng);
    let mut scaled = q.clone();
    for i in 0..n {
        for (j, &l) in eigenvalues.iter().enumerate() {
            let v = scaled.get(i, j) * l;
            scaled.set(i, j, v);
        }
    }
    gemm(&scaled, false, &q, true)
        .expect("square")
        .symmetrize_unchecked()
}

/// Log-spaced spectrum from `1` down to `1/cond`, largest first.
pub fn log_spectrum(n: usize, cond: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| cond.powf(-(i as f64) / (n - 1) as f64))
        .collect()
}

/// Symmetric PSD matrix with eigenvalues log-spaced in `[1/cond, 1]`.
pub fn psd_with_condition(n: usize, cond: f64, rng: &mut impl Rng) -> Matrix {
    with_spectrum(&log_spectrum(n, cond), rng)
}
