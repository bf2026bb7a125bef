//! Preconditioning structure per parameter tensor: which sides get a
//! Kronecker factor, with which exponent, and how the tensor is cut into
//! independently preconditioned blocks.
//!
//! Exponents of the preconditioned sides always sum to `-1/2`. The
//! Loewner-order bound that justifies any such split can be checked
//! numerically with [`verify_lemma`].

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ShampooConfig;
use crate::linalg::{self, frobenius_norm, kronecker, loewner_leq, mat_power_oracle, LinalgError, Matrix};

/// Largest `m·n` for which [`verify_lemma`] will build the dense `mn x mn` matrices.
pub const LEMMA_MAX_DIM: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("exponents p={p}, q={q} do not satisfy 1/p + 1/q = 1")]
    InconsistentExponents { p: f64, q: f64 },
    #[error("lemma check needs at least one gradient")]
    NoGradients,
    #[error("gradient {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{m}x{n} gradients need a {dim}x{dim} dense matrix (limit {LEMMA_MAX_DIM})")]
    Capacity { m: usize, n: usize, dim: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideDecision {
    Precondition,
    Skip,
}

impl SideDecision {
    pub fn is_preconditioned(self) -> bool {
        self == SideDecision::Precondition
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Block {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub flops: u128,
    pub memory: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Original tensor shape.
    pub tensor_shape: Vec<usize>,
    /// Matrix the tensor is viewed as: order 1 becomes `(n, 1)`, higher
    /// orders fold every trailing dimension into the columns.
    pub shape: (usize, usize),
    pub blocks: Vec<Block>,
    pub left: SideDecision,
    /// Always `Skip` for order-1 tensors, which only have a left factor.
    pub right: SideDecision,
    /// `(e_L, e_R)`; zero on skipped sides.
    pub exponents: (f64, f64),
    pub block_size: usize,
    pub complexity: Complexity,
}

impl PartitionPlan {
    pub fn left_exponent(&self) -> Option<f64> {
        self.left.is_preconditioned().then_some(self.exponents.0)
    }

    pub fn right_exponent(&self) -> Option<f64> {
        self.right.is_preconditioned().then_some(self.exponents.1)
    }

    /// Tensor dimensions left unpreconditioned because they exceed the limit.
    pub fn skipped_dims(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.left.is_preconditioned() {
            out.push(0);
        }
        if self.tensor_shape.len() >= 2 && !self.right.is_preconditioned() {
            out.push(1);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let blocks: Vec<_> = self
            .blocks
            .iter()
            .map(|b| serde_json::json!({"rows": [b.rows.start, b.rows.end], "cols": [b.cols.start, b.cols.end]}))
            .collect();
        serde_json::json!({
            "blocks": blocks,
            "exponents": [self.exponents.0, self.exponents.1],
            "skipped_dims": self.skipped_dims(),
            "flops": self.complexity.flops as f64,
            "memory": self.complexity.memory as f64,
        })
    }
}

/// Views a tensor shape as a matrix.
pub fn matricize(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

fn split(dim: usize, block: usize) -> Vec<Range<usize>> {
    if dim <= block {
        return vec![0..dim];
    }
    (0..dim.div_ceil(block))
        .map(|i| i * block..((i + 1) * block).min(dim))
        .collect()
}

/// Decides the preconditioning structure of one tensor.
///
/// Dimensions above `max_precond_dim` are skipped (decided on the full
/// tensor); with one side left, its exponent is `-1/2`, with both `-1/4`
/// each. Dimensions above `block_size` are then cut into contiguous ranges,
/// the last possibly shorter.
pub fn plan_partition(shape: &[usize], cfg: &ShampooConfig) -> PartitionPlan {
    let (m, n) = matricize(shape);
    let order1 = shape.len() <= 1;
    let left = if m <= cfg.max_precond_dim {
        SideDecision::Precondition
    } else {
        SideDecision::Skip
    };
    let right = if !order1 && n <= cfg.max_precond_dim {
        SideDecision::Precondition
    } else {
        SideDecision::Skip
    };
    let exponents = match (left.is_preconditioned(), right.is_preconditioned()) {
        (true, true) => (-0.25, -0.25),
        (true, false) => (-0.5, 0.0),
        (false, true) => (0.0, -0.5),
        (false, false) => (0.0, 0.0),
    };
    let row_ranges = split(m, cfg.block_size);
    let col_ranges = split(n, cfg.block_size);
    let blocks = row_ranges
        .iter()
        .flat_map(|r| {
            col_ranges.iter().map(move |c| Block {
                rows: r.clone(),
                cols: c.clone(),
            })
        })
        .collect();
    let mut plan = PartitionPlan {
        tensor_shape: shape.to_vec(),
        shape: (m, n),
        blocks,
        left,
        right,
        exponents,
        block_size: cfg.block_size,
        complexity: Complexity { flops: 0, memory: 0 },
    };
    plan.complexity = complexity_account(&plan);
    plan
}

/// Big-O cost of statistics and memory with all constants set to one:
/// both sides `n²m + m²n` / `n² + m²`, one side `d²·other` / `d²`, blocked
/// with block size `b` `mnb` / `mn`, nothing preconditioned `mn` / `mn`.
pub fn complexity_account(plan: &PartitionPlan) -> Complexity {
    let (m, n) = (plan.shape.0 as u128, plan.shape.1 as u128);
    let left = plan.left.is_preconditioned();
    let right = plan.right.is_preconditioned();
    if !left && !right {
        return Complexity { flops: m * n, memory: m * n };
    }
    if plan.blocks.len() > 1 {
        let b = (plan.block_size as u128).min(m.max(n));
        return Complexity {
            flops: m * n * b,
            memory: m * n,
        };
    }
    let mut c = Complexity { flops: 0, memory: 0 };
    if left {
        c.flops += m * m * n;
        c.memory += m * m;
    }
    if right {
        c.flops += n * n * m;
        c.memory += n * n;
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheckReport {
    /// Rank bound `min(m, n)`.
    pub r: usize,
    pub p: f64,
    pub q: f64,
    /// Smallest eigenvalue of `r·L^(1/p) ⊗ R^(1/q) − H`.
    pub min_witness_eigenvalue: f64,
    /// `‖r·L^(1/p) ⊗ R^(1/q)‖_F`, the scale the tolerance is relative to.
    pub rhs_norm: f64,
    pub holds: bool,
}

fn inverse(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        1.0 / x
    }
}

/// Checks `H ⪯ r·L^(1/p) ⊗ R^(1/q)` for the given gradient sequence, where
/// `H = εI + Σ vec(G)vec(G)ᵀ` (row-major `vec`), `L = εI + Σ GGᵀ`,
/// `R = εI + Σ GᵀG` and `r = min(m, n)`. Either of `p`, `q` may be
/// `f64::INFINITY`. Holds iff the witness is `≥ -tol·‖RHS‖_F`.
pub fn verify_lemma(gradients: &[Matrix], p: f64, q: f64, eps: f64, tol: f64) -> Result<LemmaCheckReport, PartitionError> {
    let (ip, iq) = (inverse(p), inverse(q));
    if !(p > 0.0 && q > 0.0) || (ip + iq - 1.0).abs() > 1e-12 {
        return Err(PartitionError::InconsistentExponents { p, q });
    }
    let first = gradients.first().ok_or(PartitionError::NoGradients)?;
    let (m, n) = first.shape();
    for (index, g) in gradients.iter().enumerate() {
        if g.shape() != (m, n) {
            return Err(PartitionError::ShapeMismatch {
                index,
                expected: (m, n),
                got: g.shape(),
            });
        }
    }
    let dim = m * n;
    if dim > LEMMA_MAX_DIM {
        return Err(PartitionError::Capacity { m, n, dim });
    }

    let mut h = Matrix::scaled_identity(dim, eps);
    let mut l = Matrix::scaled_identity(m, eps);
    let mut r = Matrix::scaled_identity(n, eps);
    for g in gradients {
        // row-major storage is exactly the row-stacking vec
        let v = Matrix::column(g.data());
        h.axpy(1.0, &linalg::gemm(&v, false, &v, true)?)?;
        l.axpy(1.0, &linalg::gemm(g, false, g, true)?)?;
        r.axpy(1.0, &linalg::gemm(g, true, g, false)?)?;
    }
    let rank = m.min(n);
    let rhs = kronecker(&mat_power_oracle(&l, ip)?, &mat_power_oracle(&r, iq)?)?.scale(rank as f64);
    let rhs = rhs.symmetrize_unchecked();
    let h = h.symmetrize_unchecked();
    let check = loewner_leq(&h, &rhs, 0.0)?;
    let rhs_norm = frobenius_norm(&rhs);
    Ok(LemmaCheckReport {
        r: rank,
        p,
        q,
        min_witness_eigenvalue: check.min_eigenvalue,
        rhs_norm,
        holds: check.min_eigenvalue >= -tol * rhs_norm,
    })
}
