//! Record/replay reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and its operand
//! ids. `backward` replays the recorded nodes in the exact reverse of record
//! order, accumulating vector-Jacobian products into each operand. All
//! forward values are computed with the same kernels the pure evaluation
//! paths use, so a taped forward pass is bitwise-identical to its untaped
//! counterpart, and two backward passes over the same recording are
//! bitwise-identical to each other.
//!
//! The Sinkhorn projection is differentiated by unrolling: `sinkhorn`
//! records the exponential and every normalization step as ordinary nodes,
//! so the backward sweep traverses all `t_max` iterations.

use std::collections::BTreeSet;

use crate::error::{MhcError, Result};
use crate::grad::{GradientBundle, ParamKey};
use crate::matrix::{self, Matrix};
use crate::sinkhorn::{self, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Source {
    Param(ParamKey),
    Input,
    Constant,
    Op(Op),
}

#[derive(Debug, Clone)]
enum Op {
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    MulScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    RmsNormRows(NodeId, f64),
    RowNormalize(NodeId),
    ColNormalize(NodeId),
    MeanRows(NodeId),
    BroadcastRows(NodeId),
    SumAll(NodeId),
    CrossEntropyRows(NodeId, Vec<usize>),
}

struct Node {
    value: Matrix,
    source: Source,
}

/// The recording. One tape per forward/backward pair; reuse across steps is
/// possible but the harness records a fresh tape each step for clarity.
pub struct Tape {
    nodes: Vec<Node>,
    param_keys: BTreeSet<ParamKey>,
    input_count: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_keys: BTreeSet::new(),
            input_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, source: Source) -> NodeId {
        self.nodes.push(Node { value, source });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a learnable leaf. Each key may appear once per tape.
    pub fn param(&mut self, key: ParamKey, value: Matrix) -> Result<NodeId> {
        if !self.param_keys.insert(key) {
            return Err(MhcError::invalid(format!(
                "parameter {key} registered twice on one tape"
            )));
        }
        Ok(self.push(value, Source::Param(key)))
    }

    /// Registers a scalar learnable leaf as a `1 x 1` node.
    pub fn scalar_param(&mut self, key: ParamKey, value: f64) -> Result<NodeId> {
        self.param(key, Matrix::filled(1, 1, value))
    }

    /// Registers the differentiated input. At most one per tape; batch
    /// members that do not need input gradients enter as constants.
    pub fn input(&mut self, value: Matrix) -> Result<NodeId> {
        if self.input_count > 0 {
            return Err(MhcError::invalid("a tape carries at most one input leaf"));
        }
        self.input_count += 1;
        Ok(self.push(value, Source::Input))
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Source::Constant)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Source::Op(Op::Add(a, b))))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(v, Source::Op(Op::Sub(a, b))))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        Ok(self.push(v, Source::Op(Op::Hadamard(a, b))))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Source::Op(Op::MatMul(a, b))))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Source::Op(Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.nodes[a.0].value.reshape(rows, cols)?;
        Ok(self.push(v, Source::Op(Op::Reshape(a))))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Source::Op(Op::ScaleConst(a, c)))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.add_scalar(c);
        self.push(v, Source::Op(Op::AddConst(a)))
    }

    /// Scalar node times matrix node; `s` must be `1 x 1`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = &self.nodes[s.0].value;
        if sv.rows() != 1 || sv.cols() != 1 {
            return Err(MhcError::invalid("mul_scalar expects a 1x1 scalar node"));
        }
        let v = self.nodes[a.0].value.scale(sv.get(0, 0));
        Ok(self.push(v, Source::Op(Op::MulScalar(a, s))))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = matrix::sigmoid(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = matrix::tanh(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::Tanh(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = matrix::exp(&self.nodes[a.0].value)?;
        Ok(self.push(v, Source::Op(Op::Exp(a))))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = matrix::gelu(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::Gelu(a)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = matrix::softmax_rows(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::SoftmaxRows(a)))
    }

    pub fn rmsnorm_rows(&mut self, a: NodeId, epsilon: f64) -> NodeId {
        let v = matrix::rmsnorm(&self.nodes[a.0].value, epsilon);
        self.push(v, Source::Op(Op::RmsNormRows(a, epsilon)))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let v = sinkhorn::row_normalize(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::RowNormalize(a)))
    }

    pub fn col_normalize(&mut self, a: NodeId) -> NodeId {
        let v = sinkhorn::col_normalize(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::ColNormalize(a)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = matrix::mean_rows(&self.nodes[a.0].value);
        self.push(v, Source::Op(Op::MeanRows(a)))
    }

    /// Copies a `1 x C` row into `n` identical rows.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.rows() != 1 {
            return Err(MhcError::invalid("broadcast_rows expects a row vector"));
        }
        if n == 0 {
            return Err(MhcError::invalid("broadcast_rows needs n >= 1"));
        }
        let v = Matrix::from_fn(n, src.cols(), |_, j| src.get(0, j));
        Ok(self.push(v, Source::Op(Op::BroadcastRows(a))))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.nodes[a.0].value.sum());
        self.push(v, Source::Op(Op::SumAll(a)))
    }

    /// Mean over rows of the negative log softmax probability of each row's
    /// target class. Returns a `1 x 1` loss node.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[logits.0].value;
        if targets.len() != x.rows() {
            return Err(MhcError::invalid(format!(
                "cross_entropy_rows got {} targets for {} rows",
                targets.len(),
                x.rows()
            )));
        }
        for &t in targets {
            if t >= x.cols() {
                return Err(MhcError::invalid(format!(
                    "target class {t} out of range for {} logits",
                    x.cols()
                )));
            }
        }
        let probs = matrix::softmax_rows(x);
        let mut acc = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            acc += -probs.get(i, t).ln();
        }
        let v = Matrix::filled(1, 1, acc / x.rows() as f64);
        Ok(self.push(v, Source::Op(Op::CrossEntropyRows(logits, targets.to_vec()))))
    }

    /// Records the full Sinkhorn projection as `exp` plus `t_max` unrolled
    /// normalization pairs. The guard shift is a recorded constant offset;
    /// that is exact for gradients because the projection is invariant to
    /// global shifts.
    pub fn sinkhorn(&mut self, m_tilde: NodeId, cfg: &SinkhornConfig) -> Result<NodeId> {
        cfg.validate()?;
        let v = &self.nodes[m_tilde.0].value;
        if v.rows() != v.cols() {
            return Err(MhcError::NotSquare {
                op: "tape sinkhorn",
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        let shift = sinkhorn::guard_shift(v, cfg);
        let shifted = self.add_const(m_tilde, -shift);
        let mut m = self.exp(shifted)?;
        for _ in 0..cfg.t_max {
            let c = self.col_normalize(m);
            m = self.row_normalize(c);
        }
        Ok(m)
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// registered parameter leaf (zeros for leaves the loss does not reach)
    /// and for the input leaf if one exists.
    pub fn backward(&self, loss: NodeId) -> Result<GradientBundle> {
        let lv = &self.nodes[loss.0].value;
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(MhcError::invalid(format!(
                "backward requires a scalar loss node, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }

        let mut adjoints: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            match &self.nodes[idx].source {
                Source::Param(_) | Source::Input | Source::Constant => {
                    adjoints[idx] = Some(g);
                    continue;
                }
                Source::Op(op) => {
                    self.apply_backward_rule(op, &g, &mut adjoints)?;
                }
            }
        }

        let mut params = std::collections::BTreeMap::new();
        let mut input = None;
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.source {
                Source::Param(key) => {
                    let g = adjoints[idx]
                        .clone()
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                    params.insert(*key, g);
                }
                Source::Input => {
                    input = Some(
                        adjoints[idx]
                            .clone()
                            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())),
                    );
                }
                _ => {}
            }
        }
        Ok(GradientBundle { params, input })
    }

    fn apply_backward_rule(
        &self,
        op: &Op,
        g: &Matrix,
        adjoints: &mut [Option<Matrix>],
    ) -> Result<()> {
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let mut acc = |id: &NodeId, delta: Matrix| -> Result<()> {
            match &mut adjoints[id.0] {
                Some(existing) => existing.add_scaled_assign(&delta, 1.0)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match op {
            Op::Add(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                acc(a, g.hadamard(val(b))?)?;
                acc(b, g.hadamard(val(a))?)?;
            }
            Op::MatMul(a, b) => {
                acc(a, matrix::matmul(g, &val(b).transpose())?)?;
                acc(b, matrix::matmul(&val(a).transpose(), g)?)?;
            }
            Op::Transpose(a) => {
                acc(a, g.transpose())?;
            }
            Op::Reshape(a) => {
                let p = val(a);
                acc(a, g.reshape(p.rows(), p.cols())?)?;
            }
            Op::ScaleConst(a, c) => {
                acc(a, g.scale(*c))?;
            }
            Op::AddConst(a) => {
                acc(a, g.clone())?;
            }
            Op::MulScalar(a, s) => {
                let sv = val(s).get(0, 0);
                acc(a, g.scale(sv))?;
                let ds = g.frobenius_dot(val(a))?;
                acc(s, Matrix::filled(1, 1, ds))?;
            }
            Op::Sigmoid(a) => {
                let y = matrix::sigmoid(val(a));
                let dy = y.map(|v| v * (1.0 - v));
                acc(a, g.hadamard(&dy)?)?;
            }
            Op::Tanh(a) => {
                let y = matrix::tanh(val(a));
                let dy = y.map(|v| 1.0 - v * v);
                acc(a, g.hadamard(&dy)?)?;
            }
            Op::Exp(a) => {
                let y = matrix::exp(val(a))?;
                acc(a, g.hadamard(&y)?)?;
            }
            Op::Gelu(a) => {
                let dy = val(a).map(matrix::gelu_grad_scalar);
                acc(a, g.hadamard(&dy)?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = matrix::softmax_rows(val(a));
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(a, dx)?;
            }
            Op::RmsNormRows(a, eps) => {
                let x = val(a);
                let d = x.cols() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let mean_sq =
                        x.row(i).iter().map(|v| v * v).sum::<f64>() / d;
                    let r = (mean_sq + eps).sqrt();
                    let dot: f64 = (0..x.cols()).map(|j| g.get(i, j) * x.get(i, j)).sum();
                    for j in 0..x.cols() {
                        dx.set(i, j, g.get(i, j) / r - x.get(i, j) * dot / (d * r * r * r));
                    }
                }
                acc(a, dx)?;
            }
            Op::RowNormalize(a) => {
                acc(a, sinkhorn::row_normalize_vjp(val(a), g))?;
            }
            Op::ColNormalize(a) => {
                acc(a, sinkhorn::col_normalize_vjp(val(a), g))?;
            }
            Op::MeanRows(a) => {
                let p = val(a);
                let scale = 1.0 / p.rows() as f64;
                let dx = Matrix::from_fn(p.rows(), p.cols(), |_, j| g.get(0, j) * scale);
                acc(a, dx)?;
            }
            Op::BroadcastRows(a) => {
                let p = val(a);
                let mut dx = Matrix::zeros(1, p.cols());
                for j in 0..p.cols() {
                    let mut s = 0.0;
                    for i in 0..g.rows() {
                        s += g.get(i, j);
                    }
                    dx.set(0, j, s);
                }
                acc(a, dx)?;
            }
            Op::SumAll(a) => {
                let p = val(a);
                acc(a, Matrix::filled(p.rows(), p.cols(), g.get(0, 0)))?;
            }
            Op::CrossEntropyRows(a, targets) => {
                let x = val(a);
                let probs = matrix::softmax_rows(x);
                let scale = g.get(0, 0) / x.rows() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dx.set(i, j, scale * (probs.get(i, j) - onehot));
                    }
                }
                acc(a, dx)?;
            }
        }
        Ok(())
    }
}
