//! Sinkhorn-Knopp projection onto the doubly stochastic manifold.
//!
//! The projection takes a square logit matrix, exponentiates it entrywise
//! (so every entry is strictly positive), then alternates column and row
//! normalization for a fixed number of iterations. Each iteration applies
//! the column step first and the row step last, so the returned matrix has
//! row sums exact to machine precision while column sums carry the
//! truncation residual of the final iteration.
//!
//! The iteration count is always exactly `t_max`; there is no early exit.
//! That makes the operation a fixed-size differentiable program, and the
//! backward pass (`sinkhorn_vjp`) simply runs the same chain in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};
use crate::matrix::{self, Matrix};

/// Settings for the projection.
///
/// `overflow_guard` subtracts the global max entry before exponentiation.
/// The projection is invariant to global shifts (the normalizations cancel
/// any common factor), so the guard changes nothing mathematically while
/// keeping `exp` in range for large logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub t_max: usize,
    pub overflow_guard: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            t_max: 20,
            overflow_guard: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(MhcError::invalid("sinkhorn t_max must be at least 1"));
        }
        Ok(())
    }
}

/// How far a square matrix sits from the doubly stochastic manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsDiagnostics {
    /// max_i |sum_j m_ij - 1|
    pub max_row_dev: f64,
    /// max_j |sum_i m_ij - 1|
    pub max_col_dev: f64,
    /// Smallest entry; positive for anything produced by the projection.
    pub min_entry: f64,
}

fn require_square(m: &Matrix, op: &'static str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(MhcError::NotSquare {
            op,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(())
}

/// Divides each row by its sum. Callers guarantee positive entries.
pub(crate) fn row_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j) / s);
        }
    }
    out
}

/// Divides each column by its sum. Callers guarantee positive entries.
pub(crate) fn col_normalize(m: &Matrix) -> Matrix {
    let sums = matrix::col_sums(m);
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j) / sums[j]);
        }
    }
    out
}

/// Backward of [`row_normalize`] at input `x` with upstream gradient `g`:
/// `dx_ij = (g_ij - sum_k g_ik x_ik / s_i) / s_i`.
pub(crate) fn row_normalize_vjp(x: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let s: f64 = x.row(i).iter().sum();
        let mut weighted = 0.0;
        for k in 0..x.cols() {
            weighted += g.get(i, k) * x.get(i, k) / s;
        }
        for j in 0..x.cols() {
            out.set(i, j, (g.get(i, j) - weighted) / s);
        }
    }
    out
}

/// Backward of [`col_normalize`]; the column-wise mirror of
/// [`row_normalize_vjp`].
pub(crate) fn col_normalize_vjp(x: &Matrix, g: &Matrix) -> Matrix {
    let sums = matrix::col_sums(x);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for j in 0..x.cols() {
        let s = sums[j];
        let mut weighted = 0.0;
        for k in 0..x.rows() {
            weighted += g.get(k, j) * x.get(k, j) / s;
        }
        for i in 0..x.rows() {
            out.set(i, j, (g.get(i, j) - weighted) / s);
        }
    }
    out
}

pub(crate) fn guard_shift(m_tilde: &Matrix, cfg: &SinkhornConfig) -> f64 {
    if cfg.overflow_guard {
        m_tilde.max_entry()
    } else {
        0.0
    }
}

/// Projects a square logit matrix onto the doubly stochastic manifold:
/// `M0 = exp(m_tilde)`, then `t_max` rounds of column normalization followed
/// by row normalization.
pub fn sinkhorn_project(m_tilde: &Matrix, cfg: &SinkhornConfig) -> Result<Matrix> {
    cfg.validate()?;
    require_square(m_tilde, "sinkhorn_project")?;
    let shift = guard_shift(m_tilde, cfg);
    let mut m = matrix::exp(&m_tilde.add_scalar(-shift))?;
    for _ in 0..cfg.t_max {
        m = row_normalize(&col_normalize(&m));
    }
    Ok(m)
}

/// Row-sum and column-sum deviations from 1, plus the smallest entry.
pub fn ds_diagnostics(m: &Matrix) -> Result<DsDiagnostics> {
    require_square(m, "ds_diagnostics")?;
    let max_row_dev = matrix::row_sums(m)
        .iter()
        .fold(0.0f64, |acc, s| acc.max((s - 1.0).abs()));
    let max_col_dev = matrix::col_sums(m)
        .iter()
        .fold(0.0f64, |acc, s| acc.max((s - 1.0).abs()));
    Ok(DsDiagnostics {
        max_row_dev,
        max_col_dev,
        min_entry: m.min_entry(),
    })
}

/// Vector-Jacobian product of [`sinkhorn_project`]: given the upstream
/// gradient at the projected output, returns the gradient at `m_tilde`.
///
/// The forward chain is recomputed here rather than stored by the caller;
/// the normalizer backward kernels are shared with the tape, so recomputing
/// and replaying stored values produce bitwise-identical gradients.
///
/// The guard shift is treated as a constant in the backward pass. That is
/// exact: the projection is invariant to global shifts, so the true gradient
/// has zero component along the all-ones direction the shift moves in.
pub fn sinkhorn_vjp(m_tilde: &Matrix, upstream: &Matrix, cfg: &SinkhornConfig) -> Result<Matrix> {
    cfg.validate()?;
    require_square(m_tilde, "sinkhorn_vjp")?;
    if m_tilde.rows() != upstream.rows() || m_tilde.cols() != upstream.cols() {
        return Err(MhcError::ShapeMismatch {
            op: "sinkhorn_vjp",
            a_rows: m_tilde.rows(),
            a_cols: m_tilde.cols(),
            b_rows: upstream.rows(),
            b_cols: upstream.cols(),
        });
    }

    // Forward replay, keeping the input of every normalization step.
    let shift = guard_shift(m_tilde, cfg);
    let m0 = matrix::exp(&m_tilde.add_scalar(-shift))?;
    let mut col_inputs = Vec::with_capacity(cfg.t_max);
    let mut row_inputs = Vec::with_capacity(cfg.t_max);
    let mut m = m0.clone();
    for _ in 0..cfg.t_max {
        col_inputs.push(m.clone());
        let c = col_normalize(&m);
        row_inputs.push(c.clone());
        m = row_normalize(&c);
    }

    // Reverse sweep through the unrolled iterations.
    let mut g = upstream.clone();
    for t in (0..cfg.t_max).rev() {
        g = row_normalize_vjp(&row_inputs[t], &g);
        g = col_normalize_vjp(&col_inputs[t], &g);
    }
    // d exp(x) = exp(x) dx; the shift contributes nothing (see above).
    g.hadamard(&m0)
}
