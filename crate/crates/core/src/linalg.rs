//! Dense symmetric linear algebra.
//!
//! A row-major `f64` matrix plus the handful of operations the optimizer is
//! built on: symmetric eigendecomposition (cyclic Jacobi), matrix powers via
//! the eigenbasis, Kronecker products, the Loewner-order test and entrywise
//! arithmetic. Everything here is 64-bit and pure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod random;

/// Asymmetry (relative, max-abs) above which symmetric operations refuse input.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Upper bound on the number of entries any produced matrix may hold.
pub const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("singular input: {0}")]
    Singular(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("data length {got} does not match shape {rows}x{cols}")]
    InvalidData { rows: usize, cols: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense matrix, row-major: `data[i * cols + j]` holds entry `(i, j)`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|x| format!("{x:.6e}")).collect();
            let ellipsis = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), ellipsis)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

fn checked_len(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| LinalgError::Capacity(format!("{rows}x{cols} matrix")))
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row slices.
    ///
    /// # Panics
    /// Panics if the rows have different lengths.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "row {i} has {} entries, expected {cols}", r.len());
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LinalgError::NonFinite)
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| s * x)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_diagonal(&mut self, s: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, false)
    }

    /// Copies the sub-block `rows x cols` starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let src = (r0 + i) * self.cols + c0;
            out.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[src..src + cols]);
        }
        out
    }

    /// Writes `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        assert!(
            r0 + block.rows <= self.rows && c0 + block.cols <= self.cols,
            "block out of range"
        );
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// Relative asymmetry `max|A - Aᵀ| / max(max|A|, tiny)`.
    pub fn asymmetry(&self) -> Result<f64> {
        self.require_square()?;
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Ok(worst / self.max_abs().max(f64::MIN_POSITIVE))
    }

    pub fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// Returns `(A + Aᵀ)/2`, rejecting input whose asymmetry exceeds [`SYMMETRY_TOL`].
    pub fn symmetrized(&self) -> Result<Self> {
        let asym = self.asymmetry()?;
        if asym > SYMMETRY_TOL {
            return Err(LinalgError::NotSymmetric(asym));
        }
        Ok(self.symmetrize_unchecked())
    }

    pub(crate) fn symmetrize_unchecked(&self) -> Self {
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }
}

/// `op(a) * op(b)` where `op` optionally transposes. Row-major strides are
/// passed straight to the packed kernel so transposes cost nothing.
pub fn gemm(a: &Matrix, transpose_a: bool, b: &Matrix, transpose_b: bool) -> Result<Matrix> {
    let (m, k) = if transpose_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != k2 {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: (m, k),
            right: (k2, n),
        });
    }
    checked_len(m, n)?;
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let (rsa, csa) = if transpose_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if transpose_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the pointers address buffers of exactly the sizes implied by
    // (m, k), (k, n) and (m, n) with the strides computed above, and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for i in 0..n {
            for (j, &lambda) in self.eigenvalues.iter().enumerate() {
                scaled.data[i * n + j] *= f(lambda);
            }
        }
        let out = gemm(&scaled, false, v, true).expect("square factors");
        out.symmetrize_unchecked()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|x| x)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Input is symmetrized first; asymmetry above [`SYMMETRY_TOL`] is an error.
/// Deterministic for identical input.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    a.ensure_finite()?;
    let mut w = a.symmetrized()?;
    let n = w.rows;
    // Eigenvectors are accumulated as rows of `vt` so rotations touch
    // contiguous memory; transposed once at the end.
    let mut vt = Matrix::identity(n);

    for sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += w.get(i, j).abs();
            }
        }
        if off == 0.0 {
            break;
        }
        let threshold = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                let g = 100.0 * apq.abs();
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    w.set(p, q, 0.0);
                    w.set(q, p, 0.0);
                    continue;
                }
                if apq.abs() <= threshold || apq == 0.0 {
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut w, p, q, c, s, t);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = w.diag();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.data[r * n + col] = vt.data[src * n + r];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Applies the Jacobi rotation zeroing `w[p][q]`, keeping `w` symmetric.
fn rotate(w: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = w.rows;
    let apq = w.get(p, q);
    let tau = s / (1.0 + c);
    w.data[p * n + p] -= t * apq;
    w.data[q * n + q] += t * apq;
    w.data[p * n + q] = 0.0;
    w.data[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = w.data[p * n + k];
        let akq = w.data[q * n + k];
        let new_p = akp - s * (akq + tau * akp);
        let new_q = akq + s * (akp - tau * akq);
        w.data[p * n + k] = new_p;
        w.data[q * n + k] = new_q;
        w.data[k * n + p] = new_p;
        w.data[k * n + q] = new_q;
    }
}

fn rotate_rows(vt: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = vt.cols;
    let (head, tail) = vt.data.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// `A^alpha = U D^alpha Uᵀ` through the eigenbasis. Ground truth for the
/// iterative root solver.
///
/// Eigenvalues within `-1e-12 * λmax` of zero are clamped to zero. A
/// negative power of a matrix with a zero eigenvalue is singular.
pub fn mat_power_oracle(a: &Matrix, alpha: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let n = a.rows;
    if alpha == 0.0 {
        return Ok(Matrix::identity(n));
    }
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let integral = alpha >= 0.0 && alpha.fract() == 0.0;
    if integral {
        let k = alpha as i32;
        return Ok(eig.reconstruct_with(|x| x.powi(k)));
    }
    let floor = -1e-12 * lmax;
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&x| x < floor) {
        return Err(LinalgError::Singular(format!(
            "eigenvalue {neg:e} is negative; non-integral power {alpha} undefined"
        )));
    }
    if alpha < 0.0 && eig.min() <= 0.0 {
        return Err(LinalgError::Singular(format!(
            "smallest eigenvalue {:e} is not positive; power {alpha} undefined",
            eig.min()
        )));
    }
    Ok(eig.reconstruct_with(|x| x.max(0.0).powf(alpha)))
}

/// Kronecker product: block `(i, j)` of the result equals `a[i][j] * b`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a
        .rows
        .checked_mul(b.rows)
        .ok_or_else(|| LinalgError::Capacity("kronecker rows overflow".into()))?;
    let cols = a
        .cols
        .checked_mul(b.cols)
        .ok_or_else(|| LinalgError::Capacity("kronecker cols overflow".into()))?;
    checked_len(rows, cols)?;
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            for bi in 0..b.rows {
                let dst = (i * b.rows + bi) * cols + j * b.cols;
                for (o, &x) in out.data[dst..dst + b.cols].iter_mut().zip(b.row(bi)) {
                    *o = aij * x;
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of a Loewner-order comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoewnerCheck {
    pub holds: bool,
    /// Smallest eigenvalue of `B - A`.
    pub min_eigenvalue: f64,
}

/// Tests `A ⪯ B`: holds iff `λmin(B - A) >= -tol * max(1, ‖B - A‖_F)`.
pub fn loewner_leq(a: &Matrix, b: &Matrix, tol: f64) -> Result<LoewnerCheck> {
    a.same_shape(b, "loewner_leq")?;
    let diff = b.sub(a)?;
    let eig = sym_eig(&diff)?;
    let witness = eig.min();
    let scale = frobenius_norm(&diff).max(1.0);
    Ok(LoewnerCheck {
        holds: witness >= -tol * scale,
        min_eigenvalue: witness,
    })
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.same_shape(b, "hadamard")?;
    Ok(a.zip_map(b, |x, y| x * y))
}

/// Entrywise power. With a negative exponent every entry must be positive,
/// unless `floor` is given, in which case entries are first clamped to at
/// least `floor`.
pub fn elementwise_power(a: &Matrix, alpha: f64, floor: Option<f64>) -> Result<Matrix> {
    if let Some(f) = floor {
        return Ok(a.map(|x| x.max(f).powf(alpha)));
    }
    if alpha < 0.0 {
        if let Some(&bad) = a.data.iter().find(|&&x| x <= 0.0) {
            return Err(LinalgError::Singular(format!(
                "entry {bad:e} raised to negative power {alpha}"
            )));
        }
    }
    Ok(a.map(|x| x.powf(alpha)))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frobenius inner product `Σ a_ij b_ij`.
pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.same_shape(b, "frobenius_dot")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Relative Frobenius distance `‖a - b‖_F / ‖b‖_F`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(frobenius_norm(&diff) / frobenius_norm(b).max(f64::MIN_POSITIVE))
}

/// Cholesky factorization attempt; `true` iff every pivot is positive.
pub(crate) fn cholesky_succeeds(a: &Matrix) -> bool {
    let n = a.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    true
}
