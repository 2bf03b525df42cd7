//! Dense row-major matrices and the elementwise kernels the rest of the
//! library is built on.
//!
//! Everything is `f64`. Shapes in this codebase are tiny (streams n <= 8,
//! widths C <= a few thousand), so the kernels favor being obviously correct
//! over being fast: matmul is the naive triple loop, reductions are plain
//! accumulation in index order. Determinism matters more than speed here;
//! every function evaluates in a fixed order so repeated runs are
//! bitwise-identical.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};

/// Largest entry magnitude accepted by [`exp`]. `f64::exp` overflows to
/// infinity a little above 709; callers that need exp of wider-ranged inputs
/// are expected to shift them first (see the Sinkhorn overflow guard).
pub const EXP_ARG_LIMIT: f64 = 700.0;

/// Epsilon added inside the sqrt argument of [`rmsnorm`].
pub const DEFAULT_RMS_EPSILON: f64 = 1e-20;

/// Step used by central finite differences unless a caller overrides it.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Shared numeric settings: normalization epsilon, finite-difference step,
/// and the seed for reproducible randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericConfig {
    pub rms_epsilon: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for NumericConfig {
    fn default() -> Self {
        NumericConfig {
            rms_epsilon: DEFAULT_RMS_EPSILON,
            fd_step: DEFAULT_FD_STEP,
            seed: 0,
        }
    }
}

impl NumericConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rms_epsilon > 0.0 && self.rms_epsilon.is_finite()) {
            return Err(MhcError::invalid(format!(
                "rms_epsilon must be positive and finite, got {}",
                self.rms_epsilon
            )));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(MhcError::invalid(format!(
                "fd_step must be positive and finite, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix. Row vectors are `1 x d`.
///
/// Serializes as nested row arrays (`[[a, b], [c, d]]`) so checkpoints and
/// heatmap documents stay human-readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MhcError::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(MhcError::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(MhcError::invalid("matrix needs at least one row and column"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MhcError::invalid("ragged rows in matrix literal"));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "row vector needs at least one entry");
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row index out of bounds");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Reinterprets the entries in row-major order under a new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(MhcError::invalid(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Matrix::new(rows, cols, self.data.clone())
    }

    /// Row-major flattening into a `1 x (rows*cols)` row vector.
    pub fn flatten_row(&self) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Matrix {
        self.map(|x| x + c)
    }

    /// In-place `self += scale * other`; the gradient accumulation primitive.
    pub fn add_scaled_assign(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, &x| m.min(x))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Sum of elementwise products; the scalar backward of matrix-scalar
    /// multiplication.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MhcError::ShapeMismatch {
                op,
                a_rows: self.rows,
                a_cols: self.cols,
                b_rows: other.rows,
                b_cols: other.cols,
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = MhcError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }
}

/// Naive `O(r*k*c)` matrix product. Each output entry is one independent
/// left-to-right accumulation, which both the fused-mapping equivalence and
/// the bitwise determinism guarantees rely on.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(MhcError::ShapeMismatch {
            op: "matmul",
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Root-mean-square normalization, applied to each row independently:
/// `y = x / sqrt(mean(x^2) + epsilon)`. The epsilon sits inside the sqrt
/// argument, so the all-zero row maps to the all-zero row.
pub fn rmsnorm(m: &Matrix, epsilon: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = m.row(i);
        let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
        let r = (mean_sq + epsilon).sqrt();
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j) / r);
        }
    }
    out
}

/// Per-row normalizer values `sqrt(mean(x^2) + epsilon)` used by [`rmsnorm`].
pub fn rms_values(m: &Matrix, epsilon: f64) -> Vec<f64> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            (mean_sq + epsilon).sqrt()
        })
        .collect()
}

pub fn sigmoid(m: &Matrix) -> Matrix {
    m.map(sigmoid_scalar)
}

pub fn tanh(m: &Matrix) -> Matrix {
    m.map(f64::tanh)
}

/// Elementwise exp. Rejects entries above [`EXP_ARG_LIMIT`] instead of
/// silently producing infinities; callers with larger inputs shift them
/// first. Arbitrarily negative entries are fine: they underflow to zero.
pub fn exp(m: &Matrix) -> Result<Matrix> {
    for &x in m.data() {
        if x > EXP_ARG_LIMIT {
            return Err(MhcError::ExponentRange {
                op: "exp",
                value: x,
                limit: EXP_ARG_LIMIT,
            });
        }
    }
    Ok(m.map(f64::exp))
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

/// Smooth GELU (tanh form): `0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Exact derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(m: &Matrix) -> Matrix {
    m.map(gelu_scalar)
}

/// Row-wise softmax with per-row max subtraction, so any finite input is
/// safe.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row_max = m.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..m.cols() {
            let e = (m.get(i, j) - row_max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..m.cols() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Euclidean norm over all entries.
pub fn l2_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-column mean over rows, returned as a `1 x cols` row.
pub fn mean_rows(m: &Matrix) -> Matrix {
    let n = m.rows() as f64;
    Matrix::from_fn(1, m.cols(), |_, j| {
        let mut acc = 0.0;
        for i in 0..m.rows() {
            acc += m.get(i, j);
        }
        acc / n
    })
}

pub fn row_sums(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}

pub fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            sums[j] += m.get(i, j);
        }
    }
    sums
}
