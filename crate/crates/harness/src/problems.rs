//! Synthetic training problems with analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use shampoo::linalg::{frobenius_dot, gemm, random, Matrix};
use shampoo::partition::matricize;

use crate::HarnessError;

/// Sample indices of a minibatch; `None` means the full data set.
pub type Batch<'a> = Option<&'a [usize]>;

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    /// Tensor shapes of the parameters, in the order of `init`.
    fn shapes(&self) -> Vec<Vec<usize>>;

    /// Starting point; each tensor is given in its matricized form.
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<Matrix>;

    /// Number of training samples to draw minibatches from; zero for
    /// problems without data.
    fn n_samples(&self) -> usize {
        0
    }

    fn loss(&self, params: &[Matrix], batch: Batch) -> f64;

    fn gradient(&self, params: &[Matrix], batch: Batch) -> Vec<Matrix>;

    /// Held-out loss; the full-data loss where there is nothing held out.
    fn eval_loss(&self, params: &[Matrix]) -> f64 {
        self.loss(params, None)
    }

    fn optimum_loss(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        m: usize,
        n: usize,
        cond: f64,
        /// Use a diagonal left curvature factor (needed for very tall `m`).
        #[serde(default)]
        left_diagonal: bool,
        /// Condition of the left factor; the right one gets the rest.
        /// Defaults to an even split.
        #[serde(default)]
        left_cond: Option<f64>,
    },
    Logistic {
        dim: usize,
        n_samples: usize,
        separation: f64,
    },
    Mlp {
        widths: Vec<usize>,
        n_samples: usize,
    },
}

impl ProblemConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Problem>, HarnessError> {
        Ok(match self {
            ProblemConfig::Quadratic {
                m,
                n,
                cond,
                left_diagonal,
                left_cond,
            } => {
                let left = left_cond.unwrap_or(cond.sqrt());
                Box::new(Quadratic::generate(seed, *m, *n, (left, cond / left), *left_diagonal)?)
            }
            ProblemConfig::Logistic {
                dim,
                n_samples,
                separation,
            } => Box::new(Logistic::generate(seed, *dim, *n_samples, *separation)?),
            ProblemConfig::Mlp { widths, n_samples } => Box::new(Mlp::generate(seed, widths, *n_samples)?),
        })
    }
}

#[derive(Debug, Clone)]
enum LeftFactor {
    Dense(Matrix),
    Diagonal(Vec<f64>),
}

/// `f(W) = ½ ⟨W − W*, S (W − W*) T⟩` with `S = AᵀA`, `T = BBᵀ`.
///
/// The Hessian `T ⊗ S` has condition `cond.0·cond.1`, the two being the
/// conditions of `S` and `T`. `W*` is scaled so that `f(0) = 1`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    s: LeftFactor,
    t: Matrix,
    target: Matrix,
}

impl Quadratic {
    pub fn generate(seed: u64, m: usize, n: usize, cond: (f64, f64), left_diagonal: bool) -> Result<Self, HarnessError> {
        if m == 0 || n == 0 {
            return Err(HarnessError::Config("quadratic needs m, n >= 1".into()));
        }
        let valid = |c: f64| c >= 1.0 && c.is_finite();
        if !valid(cond.0) || !valid(cond.1) {
            return Err(HarnessError::Config("quadratic needs cond >= left_cond >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = if left_diagonal {
            let mut d = random::log_spectrum(m, cond.0);
            // spread the scales over rows instead of sorting them
            for i in (1..d.len()).rev() {
                d.swap(i, rng.random_range(0..=i));
            }
            LeftFactor::Diagonal(d)
        } else {
            LeftFactor::Dense(with_condition(m, cond.0, &mut rng))
        };
        let t = with_condition(n, cond.1, &mut rng);
        let mut q = Self {
            s,
            t,
            target: random::gaussian(m, n, &mut rng),
        };
        let f0 = q.loss(&[Matrix::zeros(m, n)], None);
        q.target.scale_in_place(f0.sqrt().recip());
        Ok(q)
    }

    fn curvature_times(&self, e: &Matrix) -> Matrix {
        let se = match &self.s {
            LeftFactor::Dense(s) => s.matmul(e).expect("shapes fixed at construction"),
            LeftFactor::Diagonal(d) => Matrix::from_fn(e.rows(), e.cols(), |i, j| d[i] * e.get(i, j)),
        };
        se.matmul(&self.t).expect("shapes fixed at construction")
    }

    fn error(&self, params: &[Matrix]) -> Matrix {
        params[0].sub(&self.target).expect("parameter shape")
    }
}

/// Rotated PSD matrix with log-spaced spectrum `1 .. 1/cond`; the identity
/// when `cond = 1`.
fn with_condition(n: usize, cond: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if cond == 1.0 {
        return Matrix::identity(n);
    }
    random::psd_with_condition(n, cond, rng)
}

impl Problem for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.target.rows(), self.target.cols()]]
    }

    fn init(&self, _rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        vec![Matrix::zeros(self.target.rows(), self.target.cols())]
    }

    fn loss(&self, params: &[Matrix], _batch: Batch) -> f64 {
        let e = self.error(params);
        0.5 * frobenius_dot(&e, &self.curvature_times(&e)).expect("same shape")
    }

    fn gradient(&self, params: &[Matrix], _batch: Batch) -> Vec<Matrix> {
        vec![self.curvature_times(&self.error(params))]
    }

    fn optimum_loss(&self) -> Option<f64> {
        Some(0.0)
    }
}

fn gaussian_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `log(1 + exp(−z))`, stable for any `z`.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `d/dz log(1 + exp(−z)) = −1 / (1 + exp(z))`
fn softplus_neg_grad(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

fn batch_indices(batch: Batch, n: usize) -> Vec<usize> {
    match batch {
        Some(b) => b.to_vec(),
        None => (0..n).collect(),
    }
}

#[derive(Debug, Clone)]
struct Dataset {
    x: Matrix,
    y: Vec<f64>,
}

/// Logistic regression on two Gaussian clusters centred at
/// `±(separation/2)·u` for a random unit vector `u`.
#[derive(Debug, Clone)]
pub struct Logistic {
    train: Dataset,
    eval: Dataset,
}

impl Logistic {
    pub fn generate(seed: u64, dim: usize, n_samples: usize, separation: f64) -> Result<Self, HarnessError> {
        if dim == 0 || n_samples == 0 {
            return Err(HarnessError::Config("logistic needs dim, n_samples >= 1".into()));
        }
        if !(separation >= 0.0) {
            return Err(HarnessError::Config("separation must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = gaussian_rows(dim, 1, &mut rng);
        let u = u.scale(shampoo::linalg::frobenius_norm(&u).recip());
        let mut draw = |count: usize| {
            let mut x = gaussian_rows(count, dim, &mut rng);
            let y: Vec<f64> = (0..count).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            for (i, &label) in y.iter().enumerate() {
                for j in 0..dim {
                    x.set(i, j, x.get(i, j) + label * 0.5 * separation * u.get(j, 0));
                }
            }
            Dataset { x, y }
        };
        let train = draw(n_samples);
        let eval = draw(n_samples.div_ceil(4).max(1));
        Ok(Self { train, eval })
    }

    fn loss_on(data: &Dataset, params: &[Matrix], idx: &[usize]) -> f64 {
        let (w, b) = (&params[0], params[1].get(0, 0));
        let total: f64 = idx
            .iter()
            .map(|&i| {
                let z: f64 = data.x.row(i).iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>() + b;
                softplus_neg(data.y[i] * z)
            })
            .sum();
        total / idx.len().max(1) as f64
    }
}

impl Problem for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.train.x.cols()], vec![1]]
    }

    fn init(&self, _rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        vec![Matrix::zeros(self.train.x.cols(), 1), Matrix::zeros(1, 1)]
    }

    fn n_samples(&self) -> usize {
        self.train.y.len()
    }

    fn loss(&self, params: &[Matrix], batch: Batch) -> f64 {
        Self::loss_on(&self.train, params, &batch_indices(batch, self.n_samples()))
    }

    fn gradient(&self, params: &[Matrix], batch: Batch) -> Vec<Matrix> {
        let idx = batch_indices(batch, self.n_samples());
        let (w, b) = (&params[0], params[1].get(0, 0));
        let dim = w.rows();
        let mut gw = Matrix::zeros(dim, 1);
        let mut gb = 0.0;
        let inv = 1.0 / idx.len().max(1) as f64;
        for &i in &idx {
            let row = self.train.x.row(i);
            let z: f64 = row.iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>() + b;
            let y = self.train.y[i];
            let d = softplus_neg_grad(y * z) * y * inv;
            for (gj, xj) in gw.data_mut().iter_mut().zip(row) {
                *gj += d * xj;
            }
            gb += d;
        }
        vec![gw, Matrix::filled(1, 1, gb)]
    }

    fn eval_loss(&self, params: &[Matrix]) -> f64 {
        Self::loss_on(&self.eval, params, &(0..self.eval.y.len()).collect::<Vec<_>>())
    }
}

/// Tanh MLP with a scalar output and logistic loss on labels
/// `sign(sin(3·v₁ᵀx) + v₂ᵀx)`.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    train: Dataset,
    eval: Dataset,
}

impl Mlp {
    pub fn generate(seed: u64, widths: &[usize], n_samples: usize) -> Result<Self, HarnessError> {
        if widths.len() < 3 {
            return Err(HarnessError::Config("mlp needs an input, at least one hidden layer and an output".into()));
        }
        if widths.contains(&0) || n_samples == 0 {
            return Err(HarnessError::Config("mlp widths and n_samples must be >= 1".into()));
        }
        if *widths.last().expect("len checked") != 1 {
            return Err(HarnessError::Config("mlp output width must be 1".into()));
        }
        let d = widths[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v1 = gaussian_rows(d, 1, &mut rng).scale((d as f64).sqrt().recip());
        let v2 = gaussian_rows(d, 1, &mut rng).scale((d as f64).sqrt().recip());
        let mut draw = |count: usize| {
            let x = gaussian_rows(count, d, &mut rng);
            let y = (0..count)
                .map(|i| {
                    let a: f64 = x.row(i).iter().zip(v1.data()).map(|(p, q)| p * q).sum();
                    let b: f64 = x.row(i).iter().zip(v2.data()).map(|(p, q)| p * q).sum();
                    if (3.0 * a).sin() + b >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            Dataset { x, y }
        };
        let train = draw(n_samples);
        let eval = draw(n_samples.div_ceil(4).max(1));
        Ok(Self {
            widths: widths.to_vec(),
            train,
            eval,
        })
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Activations per layer for the selected rows (rows are samples).
    fn forward(&self, params: &[Matrix], x: &Matrix) -> Vec<Matrix> {
        let mut acts = vec![x.clone()];
        for k in 0..self.layers() {
            let (w, b) = (&params[2 * k], &params[2 * k + 1]);
            let mut z = gemm(acts.last().expect("non-empty"), false, w, true).expect("layer shapes");
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z.set(i, j, z.get(i, j) + b.get(j, 0));
                }
            }
            if k + 1 < self.layers() {
                z = z.map(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    fn select(data: &Dataset, idx: &[usize]) -> (Matrix, Vec<f64>) {
        let d = data.x.cols();
        let x = Matrix::from_fn(idx.len(), d, |r, c| data.x.get(idx[r], c));
        (x, idx.iter().map(|&i| data.y[i]).collect())
    }

    fn loss_on(&self, data: &Dataset, params: &[Matrix], idx: &[usize]) -> f64 {
        let (x, y) = Self::select(data, idx);
        let out = self.forward(params, &x).pop().expect("output layer");
        let total: f64 = y.iter().enumerate().map(|(i, yi)| softplus_neg(yi * out.get(i, 0))).sum();
        total / idx.len().max(1) as f64
    }
}

impl Problem for Mlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
            .collect()
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        self.shapes()
            .iter()
            .map(|s| {
                let (r, c) = matricize(s);
                if s.len() == 1 {
                    Matrix::zeros(r, c)
                } else {
                    gaussian_rows(r, c, rng).scale((s[1] as f64).sqrt().recip())
                }
            })
            .collect()
    }

    fn n_samples(&self) -> usize {
        self.train.y.len()
    }

    fn loss(&self, params: &[Matrix], batch: Batch) -> f64 {
        self.loss_on(&self.train, params, &batch_indices(batch, self.n_samples()))
    }

    fn gradient(&self, params: &[Matrix], batch: Batch) -> Vec<Matrix> {
        let idx = batch_indices(batch, self.n_samples());
        let (x, y) = Self::select(&self.train, &idx);
        let acts = self.forward(params, &x);
        let inv = 1.0 / idx.len().max(1) as f64;
        let out = acts.last().expect("output layer");
        // dL/dz at the output, one row per sample
        let mut delta = Matrix::from_fn(out.rows(), 1, |i, _| softplus_neg_grad(y[i] * out.get(i, 0)) * y[i] * inv);
        let mut grads = vec![Matrix::zeros(0, 0); params.len()];
        for k in (0..self.layers()).rev() {
            let input = &acts[k];
            grads[2 * k] = gemm(&delta, true, input, false).expect("layer shapes");
            grads[2 * k + 1] = Matrix::from_fn(delta.cols(), 1, |j, _| (0..delta.rows()).map(|i| delta.get(i, j)).sum());
            if k > 0 {
                let back = delta.matmul(&params[2 * k]).expect("layer shapes");
                // tanh' = 1 − a²
                delta = Matrix::from_fn(back.rows(), back.cols(), |i, j| {
                    let a = input.get(i, j);
                    back.get(i, j) * (1.0 - a * a)
                });
            }
        }
        grads
    }

    fn eval_loss(&self, params: &[Matrix]) -> f64 {
        self.loss_on(&self.eval, params, &(0..self.eval.y.len()).collect::<Vec<_>>())
    }
}

/// Worst relative error `‖g_fd − g‖ / ‖g‖` over `points` random points near
/// the initialization, with central differences of step `h_rel·scale`.
/// Tensors with more than `max_coords` entries are probed on a random subset.
pub fn fd_check(problem: &dyn Problem, seed: u64, points: usize, h_rel: f64, max_coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Option<Vec<usize>> = (problem.n_samples() > 0).then(|| {
        let n = problem.n_samples();
        (0..n.min(16)).map(|_| rng.random_range(0..n)).collect()
    });
    let batch = batch.as_deref();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let mut params = problem.init(&mut rng);
        for p in params.iter_mut() {
            for v in p.data_mut() {
                *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let grads = problem.gradient(&params, batch);
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..params.len() {
            let len = params[k].len();
            let coords: Vec<usize> = if len <= max_coords {
                (0..len).collect()
            } else {
                (0..max_coords).map(|_| rng.random_range(0..len)).collect()
            };
            for c in coords {
                let orig = params[k].data()[c];
                let h = h_rel * orig.abs().max(1.0);
                params[k].data_mut()[c] = orig + h;
                let up = problem.loss(&params, batch);
                params[k].data_mut()[c] = orig - h;
                let down = problem.loss(&params, batch);
                params[k].data_mut()[c] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads[k].data()[c];
                num += (fd - g) * (fd - g);
                den += g * g;
            }
        }
        let err = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_normalized_with_zero_optimum() {
        let q = Quadratic::generate(1, 6, 4, (10.0, 10.0), false).unwrap();
        let w0 = q.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!((q.loss(&w0, None) - 1.0).abs() < 1e-12);
        assert_eq!(q.loss(std::slice::from_ref(&q.target), None), 0.0);
        assert_eq!(q.optimum_loss(), Some(0.0));
    }

    #[test]
    fn unit_condition_gradient_is_the_error() {
        let q = Quadratic::generate(2, 3, 5, (1.0, 1.0), false).unwrap();
        let w = vec![Matrix::filled(3, 5, 0.25)];
        let g = q.gradient(&w, None);
        assert_eq!(g[0], w[0].sub(&q.target).unwrap());
        // one step of size one lands on the optimum
        let next = w[0].sub(&g[0]).unwrap();
        assert!(q.loss(&[next], None) < 1e-30);
    }

    #[test]
    fn diagonal_left_factor_matches_dense_equivalent() {
        let q = Quadratic::generate(3, 5, 3, (10.0, 10.0), true).unwrap();
        let LeftFactor::Diagonal(d) = &q.s else { panic!("expected diagonal") };
        let dense = Quadratic {
            s: LeftFactor::Dense(Matrix::from_diag(d)),
            ..q.clone()
        };
        let w = vec![random::gaussian(5, 3, &mut ChaCha8Rng::seed_from_u64(1))];
        assert!((q.loss(&w, None) - dense.loss(&w, None)).abs() < 1e-14);
    }

    #[test]
    fn separable_logistic_loss_vanishes() {
        let p = Logistic::generate(4, 3, 64, 1e3).unwrap();
        // difference of the class means, scaled up
        let mut w = vec![0.0; 3];
        for (i, &y) in p.train.y.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(p.train.x.row(i)) {
                *wj += y * xj;
            }
        }
        let scale = 1e3 / w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let params = vec![Matrix::column(&w).scale(scale), Matrix::zeros(1, 1)];
        assert!(p.loss(&params, None) < 1e-10);
    }

    #[test]
    fn mlp_rejects_bad_widths() {
        assert!(Mlp::generate(0, &[3, 0, 1], 10).is_err());
        assert!(Mlp::generate(0, &[3, 1], 10).is_err());
        assert!(Mlp::generate(0, &[3, 4, 2], 10).is_err());
        assert!(Mlp::generate(0, &[3, 4, 1], 10).is_ok());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus_neg(1e4), 0.0);
        assert!((softplus_neg(-1e4) - 1e4).abs() < 1e-9);
        assert!((softplus_neg(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_neg_grad(0.0) + 0.5).abs() < 1e-15);
    }
}
