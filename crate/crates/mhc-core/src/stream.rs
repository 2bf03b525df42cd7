//! Stream expansion and layer/stack propagation.
//!
//! A stream state is an `n x C` matrix: n parallel residual streams of
//! width C. A layer reads a single `1 x C` input through the pre-map, runs
//! its layer function, scatters the result back through the post-map, and
//! mixes the streams with the residual matrix:
//!
//! ```text
//! x_{l+1} = h_res . x_l + h_post^T . F(h_pre . x_l)
//! ```
//!
//! With n = 1 and unit maps this is exactly the plain residual update
//! `x + F(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};
use crate::mapping::{apply_ablation, compute_mappings, AblationMask, MappingParams, MappingSet,
    Variant};
use crate::matrix::{self, Matrix, DEFAULT_RMS_EPSILON};
use crate::rng::SeededRng;

/// Number of chunks the toy attention layer splits the width into.
pub const ATTN_CHUNKS: usize = 4;

/// n parallel residual streams of width C, stored as an `n x C` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub values: Matrix,
}

impl StreamState {
    pub fn new(values: Matrix) -> Self {
        StreamState { values }
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Broadcast-copies a `1 x C` input into n identical streams.
pub fn expand(input: &Matrix, n: usize) -> Result<StreamState> {
    if input.rows() != 1 {
        return Err(MhcError::invalid(format!(
            "expand takes a row vector, got {}x{}",
            input.rows(),
            input.cols()
        )));
    }
    if n == 0 {
        return Err(MhcError::invalid("stream count must be positive"));
    }
    Ok(StreamState::new(Matrix::from_fn(n, input.cols(), |_, j| {
        input.get(0, j)
    })))
}

/// Collapses the streams back to a `1 x C` row by per-column mean.
pub fn reduce(state: &StreamState) -> Matrix {
    matrix::mean_rows(&state.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerFnKind {
    Zero,
    Linear,
    MlpPrenorm,
    ToyAttention,
}

impl std::fmt::Display for LayerFnKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerFnKind::Zero => "zero",
            LayerFnKind::Linear => "linear",
            LayerFnKind::MlpPrenorm => "mlp-prenorm",
            LayerFnKind::ToyAttention => "toy-attention",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LayerFnKind {
    type Err = MhcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(LayerFnKind::Zero),
            "linear" => Ok(LayerFnKind::Linear),
            "mlp-prenorm" => Ok(LayerFnKind::MlpPrenorm),
            "toy-attention" => Ok(LayerFnKind::ToyAttention),
            other => Err(MhcError::invalid(format!(
                "unknown layer function {other:?}; expected zero, linear, mlp-prenorm, or toy-attention"
            ))),
        }
    }
}

/// The per-layer transformation F applied to the `1 x C` pre-mapped input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerFunction {
    /// F(x) = 0; isolates pure stream mixing.
    Zero { width: usize },
    /// F(x) = x W with W of shape `C x C`.
    Linear { w: Matrix },
    /// Pre-norm two-layer MLP with GELU: `gelu(rmsnorm(x) W1) W2`,
    /// hidden width 2C.
    MlpPrenorm { w1: Matrix, w2: Matrix },
    /// Single-head attention over the width split into [`ATTN_CHUNKS`]
    /// chunks; requires C divisible by the chunk count.
    ToyAttention { wq: Matrix, wk: Matrix, wv: Matrix },
}

impl LayerFunction {
    pub fn kind(&self) -> LayerFnKind {
        match self {
            LayerFunction::Zero { .. } => LayerFnKind::Zero,
            LayerFunction::Linear { .. } => LayerFnKind::Linear,
            LayerFunction::MlpPrenorm { .. } => LayerFnKind::MlpPrenorm,
            LayerFunction::ToyAttention { .. } => LayerFnKind::ToyAttention,
        }
    }

    /// Seeded weight initialization; scales follow 1/sqrt(fan_in).
    pub fn init(kind: LayerFnKind, c: usize, seed: u64) -> Result<Self> {
        if c == 0 {
            return Err(MhcError::invalid("layer width must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let f = match kind {
            LayerFnKind::Zero => LayerFunction::Zero { width: c },
            LayerFnKind::Linear => LayerFunction::Linear {
                w: rng.matrix_normal(c, c, 0.0, 1.0 / (c as f64).sqrt()),
            },
            LayerFnKind::MlpPrenorm => {
                let hidden = 2 * c;
                LayerFunction::MlpPrenorm {
                    w1: rng.matrix_normal(c, hidden, 0.0, 1.0 / (c as f64).sqrt()),
                    w2: rng.matrix_normal(hidden, c, 0.0, 1.0 / (hidden as f64).sqrt()),
                }
            }
            LayerFnKind::ToyAttention => {
                if c % ATTN_CHUNKS != 0 {
                    return Err(MhcError::invalid(format!(
                        "toy-attention requires C divisible by {ATTN_CHUNKS}, got C = {c}"
                    )));
                }
                let d = c / ATTN_CHUNKS;
                let sd = 1.0 / (d as f64).sqrt();
                LayerFunction::ToyAttention {
                    wq: rng.matrix_normal(d, d, 0.0, sd),
                    wk: rng.matrix_normal(d, d, 0.0, sd),
                    wv: rng.matrix_normal(d, d, 0.0, sd),
                }
            }
        };
        Ok(f)
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let bad = |what: &str| {
            Err(MhcError::invalid(format!(
                "layer function weights {what} do not match width C = {c}"
            )))
        };
        match self {
            LayerFunction::Zero { width } => {
                if *width != c {
                    return bad("width");
                }
            }
            LayerFunction::Linear { w } => {
                if w.rows() != c || w.cols() != c {
                    return bad("w");
                }
            }
            LayerFunction::MlpPrenorm { w1, w2 } => {
                if w1.rows() != c || w1.cols() != 2 * c || w2.rows() != 2 * c || w2.cols() != c {
                    return bad("w1/w2");
                }
            }
            LayerFunction::ToyAttention { wq, wk, wv } => {
                if c % ATTN_CHUNKS != 0 {
                    return bad("chunking");
                }
                let d = c / ATTN_CHUNKS;
                for m in [wq, wk, wv] {
                    if m.rows() != d || m.cols() != d {
                        return bad("wq/wk/wv");
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies F to a `1 x C` row.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            LayerFunction::Zero { width } => Ok(Matrix::zeros(1, *width)),
            LayerFunction::Linear { w } => matrix::matmul(x, w),
            LayerFunction::MlpPrenorm { w1, w2 } => {
                let normed = matrix::rmsnorm(x, DEFAULT_RMS_EPSILON);
                let hidden = matrix::gelu(&matrix::matmul(&normed, w1)?);
                matrix::matmul(&hidden, w2)
            }
            LayerFunction::ToyAttention { wq, wk, wv } => {
                let d = wq.rows();
                let r = x.reshape(ATTN_CHUNKS, d)?;
                let q = matrix::matmul(&r, wq)?;
                let k = matrix::matmul(&r, wk)?;
                let v = matrix::matmul(&r, wv)?;
                let scores = matrix::matmul(&q, &k.transpose())?.scale(1.0 / (d as f64).sqrt());
                let attn = matrix::softmax_rows(&scores);
                matrix::matmul(&attn, &v)?.reshape(1, ATTN_CHUNKS * d)
            }
        }
    }
}

/// Full stack description: variant, stream geometry, one mapping parameter
/// set and one layer function per layer, plus the global ablation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub ablation: AblationMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub mapping: MappingParams,
    pub layer_fn: LayerFunction,
}

impl StackConfig {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(MhcError::invalid("stack needs at least one layer"));
        }
        if self.n == 0 || self.c == 0 {
            return Err(MhcError::invalid("n and C must be positive"));
        }
        if self.variant == Variant::Baseline && self.n != 1 {
            return Err(MhcError::invalid("baseline variant requires n = 1"));
        }
        for (l, entry) in self.layers.iter().enumerate() {
            let p = &entry.mapping;
            if p.variant != self.variant || p.n != self.n || p.c != self.c {
                return Err(MhcError::invalid(format!(
                    "layer {l} mapping parameters disagree with the stack geometry"
                )));
            }
            p.validate()?;
            entry.layer_fn.validate(self.c)?;
        }
        Ok(())
    }
}

/// Single layer update `h_res . x + h_post^T . F(h_pre . x)`.
pub fn layer_forward(x: &StreamState, ms: &MappingSet, f: &LayerFunction) -> Result<StreamState> {
    let layer_in = matrix::matmul(&ms.h_pre, &x.values)?;
    let fout = f.eval(&layer_in)?;
    if !fout.is_finite() {
        return Err(MhcError::NonFiniteOutput);
    }
    let mixed = matrix::matmul(&ms.h_res, &x.values)?;
    let written = matrix::matmul(&ms.h_post.transpose(), &fout)?;
    Ok(StreamState::new(mixed.add(&written)?))
}

/// Runs the whole stack, recomputing the maps from the live state at every
/// layer, and returns the final state together with the per-layer mapping
/// trace.
pub fn stack_forward(x0: &StreamState, cfg: &StackConfig) -> Result<(StreamState, Vec<MappingSet>)> {
    cfg.validate()?;
    if x0.n() != cfg.n || x0.width() != cfg.c {
        return Err(MhcError::ShapeMismatch {
            op: "stack_forward",
            a_rows: x0.n(),
            a_cols: x0.width(),
            b_rows: cfg.n,
            b_cols: cfg.c,
        });
    }
    let mut state = x0.clone();
    let mut trace = Vec::with_capacity(cfg.depth());
    for (l, entry) in cfg.layers.iter().enumerate() {
        let raw = compute_mappings(&state.values, &entry.mapping)
            .map_err(|e| at_layer(e, l))?;
        let ms = apply_ablation(&raw, &cfg.ablation, cfg.n);
        state = layer_forward(&state, &ms, &entry.layer_fn).map_err(|e| at_layer(e, l))?;
        if !state.values.is_finite() {
            return Err(MhcError::NonFiniteLayer { layer: l });
        }
        trace.push(ms);
    }
    Ok((state, trace))
}

fn at_layer(e: MhcError, layer: usize) -> MhcError {
    match e {
        MhcError::NonFiniteOutput => MhcError::NonFiniteLayer { layer },
        other => other,
    }
}

/// Composite residual map from layer `l` to layer `big_l`: the product
/// `H_{L-1} . H_{L-2} ... H_l` with the later layer on the left, so applying
/// it to `x_l` gives the mixing part of `x_L`.
pub fn composite_residual(trace: &[MappingSet], l: usize, big_l: usize) -> Result<Matrix> {
    if l >= big_l || big_l > trace.len() {
        return Err(MhcError::invalid(format!(
            "composite range [{l}, {big_l}) invalid for a trace of {} layers",
            trace.len()
        )));
    }
    let n = trace[l].h_res.rows();
    let mut product = Matrix::identity(n);
    for ms in trace[l..big_l].iter() {
        product = matrix::matmul(&ms.h_res, &product)?;
    }
    Ok(product)
}
