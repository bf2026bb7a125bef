//! Per-block optimizer state: Kronecker factor statistics, the diagonal
//! accumulator, both momentum buffers and the cached inverse roots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gemm, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("gradient shape {got:?} does not match state shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("gradient contains non-finite entries")]
    NonFinite,
    #[error("beta2 = {0} outside (0, 1]")]
    InvalidBeta2(f64),
    #[error("root snapshot from step {snapshot} is newer than statistics step {stats}")]
    FutureSnapshot { snapshot: u64, stats: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// One Kronecker factor: its statistic, the exponent applied to it and the
/// last adopted root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub stats: Matrix,
    /// e.g. `-0.25` means the root is `stats^(-1/4)`.
    pub exponent: f64,
    pub root: Option<Matrix>,
}

impl Factor {
    fn new(dim: usize, exponent: f64, eps: f64) -> Self {
        Self {
            stats: Matrix::scaled_identity(dim, eps),
            exponent,
            root: None,
        }
    }

    /// Root order `p` such that the root is `stats^(-1/p)`.
    pub fn root_order(&self) -> u32 {
        (-1.0 / self.exponent).round() as u32
    }
}

/// Inverse roots computed from one statistics snapshot, ready for adoption.
#[derive(Debug, Clone, PartialEq)]
pub struct RootPair {
    pub snapshot_step: u64,
    pub left: Option<Matrix>,
    pub right: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adoption {
    Adopted,
    /// Snapshot not newer than the current roots; nothing changed.
    Stale,
    /// Roots missing or of the wrong shape; discarded.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionerState {
    rows: usize,
    cols: usize,
    pub left: Option<Factor>,
    pub right: Option<Factor>,
    /// Running sum of `G∘G`.
    pub diag: Matrix,
    /// Grafted (diagonal AdaGrad) direction momentum `M`.
    pub momentum: Matrix,
    /// Preconditioned direction momentum `P`.
    pub precond_momentum: Matrix,
    pub stats_step: u64,
    /// Step of the statistics snapshot the cached roots came from.
    pub root_step: Option<u64>,
}

impl PreconditionerState {
    /// State for an `rows x cols` block. `left`/`right` carry the exponent
    /// of each preconditioned side; `None` leaves that side unpreconditioned.
    pub fn new(rows: usize, cols: usize, left: Option<f64>, right: Option<f64>, eps_stat: f64) -> Self {
        Self {
            rows,
            cols,
            left: left.map(|e| Factor::new(rows, e, eps_stat)),
            right: right.map(|e| Factor::new(cols, e, eps_stat)),
            diag: Matrix::zeros(rows, cols),
            momentum: Matrix::zeros(rows, cols),
            precond_momentum: Matrix::zeros(rows, cols),
            stats_step: 0,
            root_step: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn factor(&self, side: Side) -> Option<&Factor> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }

    pub fn sides(&self) -> impl Iterator<Item = Side> + '_ {
        [Side::Left, Side::Right]
            .into_iter()
            .filter(|&s| self.factor(s).is_some())
    }

    pub fn has_roots(&self) -> bool {
        self.root_step.is_some()
    }

    fn check_gradient(&self, g: &Matrix) -> Result<(), StateError> {
        if g.shape() != self.shape() {
            return Err(StateError::ShapeMismatch {
                expected: self.shape(),
                got: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(StateError::NonFinite);
        }
        Ok(())
    }

    /// Accumulates `G Gᵀ` into the left statistic and `Gᵀ G` into the right.
    /// `beta2 = 1` adds plain sums; otherwise an exponential moving average.
    pub fn update_statistics(&mut self, g: &Matrix, beta2: f64) -> Result<(), StateError> {
        self.check_gradient(g)?;
        if !(beta2 > 0.0 && beta2 <= 1.0) {
            return Err(StateError::InvalidBeta2(beta2));
        }
        if let Some(f) = self.left.as_mut() {
            let outer = gemm(g, false, g, true).expect("shape checked").symmetrize_unchecked();
            accumulate(&mut f.stats, &outer, beta2);
        }
        if let Some(f) = self.right.as_mut() {
            let outer = gemm(g, true, g, false).expect("shape checked").symmetrize_unchecked();
            accumulate(&mut f.stats, &outer, beta2);
        }
        self.stats_step += 1;
        Ok(())
    }

    /// `D += G∘G`, always a plain sum.
    pub fn update_diagonal(&mut self, g: &Matrix) -> Result<(), StateError> {
        self.check_gradient(g)?;
        for (d, x) in self.diag.data_mut().iter_mut().zip(g.data()) {
            *d += x * x;
        }
        Ok(())
    }

    /// Replaces both cached roots together. Adoption is monotone in the
    /// snapshot step: anything not newer than the current roots is ignored.
    pub fn adopt_roots(&mut self, pair: RootPair) -> Result<Adoption, StateError> {
        if pair.snapshot_step > self.stats_step {
            return Err(StateError::FutureSnapshot {
                snapshot: pair.snapshot_step,
                stats: self.stats_step,
            });
        }
        if self.root_step.is_some_and(|r| pair.snapshot_step <= r) {
            return Ok(Adoption::Stale);
        }
        let fits = |factor: &Option<Factor>, root: &Option<Matrix>| match (factor, root) {
            (None, None) => true,
            (Some(f), Some(r)) => r.shape() == f.stats.shape() && r.is_finite(),
            _ => false,
        };
        if !fits(&self.left, &pair.left) || !fits(&self.right, &pair.right) {
            log::warn!(
                "discarding roots for snapshot {} that do not fit a {:?} block",
                pair.snapshot_step,
                self.shape()
            );
            return Ok(Adoption::Rejected);
        }
        if let Some(f) = self.left.as_mut() {
            f.root = pair.left;
        }
        if let Some(f) = self.right.as_mut() {
            f.root = pair.right;
        }
        self.root_step = Some(pair.snapshot_step);
        Ok(Adoption::Adopted)
    }

    /// `root_L · G · root_R` using whichever roots this block has. `None`
    /// before the first adoption or when neither side is preconditioned.
    pub fn precondition(&self, g: &Matrix) -> Option<Matrix> {
        self.root_step?;
        if self.left.is_none() && self.right.is_none() {
            return None;
        }
        let mut out = g.clone();
        if let Some(r) = self.left.as_ref().and_then(|f| f.root.as_ref()) {
            out = r.matmul(&out).expect("root shape checked at adoption");
        }
        if let Some(r) = self.right.as_ref().and_then(|f| f.root.as_ref()) {
            out = out.matmul(r).expect("root shape checked at adoption");
        }
        Some(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state is serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, StateError> {
        let state: Self = serde_json::from_str(s).map_err(|e| StateError::Checkpoint(e.to_string()))?;
        let shape = (state.rows, state.cols);
        let square = |f: &Option<Factor>, n: usize| f.as_ref().is_none_or(|f| f.stats.shape() == (n, n));
        if state.diag.shape() != shape
            || state.momentum.shape() != shape
            || state.precond_momentum.shape() != shape
            || !square(&state.left, state.rows)
            || !square(&state.right, state.cols)
        {
            return Err(StateError::Checkpoint("inconsistent shapes".into()));
        }
        Ok(state)
    }
}

fn accumulate(stats: &mut Matrix, outer: &Matrix, beta2: f64) {
    if beta2 == 1.0 {
        for (s, o) in stats.data_mut().iter_mut().zip(outer.data()) {
            *s += o;
        }
    } else {
        for (s, o) in stats.data_mut().iter_mut().zip(outer.data()) {
            *s = beta2 * *s + (1.0 - beta2) * o;
        }
    }
}
