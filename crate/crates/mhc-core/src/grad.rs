//! Gradient bundles, uniform parameter access, finite differences, and the
//! taped construction of full stack passes.
//!
//! Every learnable scalar in a stack is addressed by a [`ParamKey`]: an
//! optional layer index plus a field name. The [`ParamAccess`] trait exposes
//! those scalars for generic consumers; [`finite_difference_gradient`] is
//! one such consumer and serves as the reference the tape gradients are
//! checked against.
//!
//! The `record_*` functions rebuild the exact computation of
//! [`stack_forward`](crate::stream::stack_forward) on a [`Tape`], using the
//! same kernels in the same order, so the taped forward value is
//! bitwise-identical to the pure one.

use std::collections::BTreeMap;

use crate::error::{MhcError, Result};
use crate::mapping::{identity_res, ones_post, uniform_pre, MappingParams, Variant};
use crate::matrix::{Matrix, DEFAULT_RMS_EPSILON};
use crate::stream::{LayerFunction, StackConfig, ATTN_CHUNKS};
use crate::tape::{NodeId, Tape};

/// Address of one learnable tensor: a layer-scoped mapping or layer-function
/// field, or a layer-independent tensor such as a task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub name: &'static str,
}

impl ParamKey {
    pub const fn layer(layer: usize, name: &'static str) -> Self {
        ParamKey {
            layer: Some(layer),
            name,
        }
    }

    pub const fn global(name: &'static str) -> Self {
        ParamKey { layer: None, name }
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer{l}.{}", self.name),
            None => f.write_str(self.name),
        }
    }
}

/// Key under which [`StackWithInput`] exposes its differentiated input.
/// [`finite_difference_gradient`] routes this key to
/// [`GradientBundle::input`] so finite-difference and tape bundles line up
/// field for field.
pub const INPUT_KEY: ParamKey = ParamKey::global("input");

/// Gradients keyed the same way the parameters are. Scalars appear as
/// `1 x 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: BTreeMap<ParamKey, Matrix>,
    pub input: Option<Matrix>,
}

impl GradientBundle {
    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.params.get(key)
    }

    pub fn norm(&self) -> f64 {
        gradient_norm(self)
    }
}

/// Euclidean norm over all parameter gradients. The input gradient is a
/// diagnostic, not an update direction, so it is excluded.
pub fn gradient_norm(bundle: &GradientBundle) -> f64 {
    let mut acc = 0.0;
    for g in bundle.params.values() {
        for v in g.data() {
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Uniform scalar-level access to a parameterized object. Indices are flat
/// row-major offsets into each named tensor.
pub trait ParamAccess {
    /// Every learnable tensor as `(key, rows, cols)`, in a deterministic
    /// order.
    fn param_shapes(&self) -> Vec<(ParamKey, usize, usize)>;

    fn param_get(&self, key: &ParamKey, idx: usize) -> Result<f64>;

    fn param_set(&mut self, key: &ParamKey, idx: usize, value: f64) -> Result<()>;
}

/// Central finite differences of `f` over every parameter of `p`,
/// perturbing one scalar at a time. Gradients under [`INPUT_KEY`] land in
/// [`GradientBundle::input`].
pub fn finite_difference_gradient<P, F>(f: F, p: &P, fd_step: f64) -> Result<GradientBundle>
where
    P: ParamAccess + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(MhcError::invalid("finite-difference step must be positive"));
    }
    let mut params = BTreeMap::new();
    let mut input = None;
    for (key, rows, cols) in p.param_shapes() {
        let mut grad = Matrix::zeros(rows, cols);
        for idx in 0..rows * cols {
            let base = p.param_get(&key, idx)?;
            let mut plus = p.clone();
            plus.param_set(&key, idx, base + fd_step)?;
            let mut minus = p.clone();
            minus.param_set(&key, idx, base - fd_step)?;
            let slope = (f(&plus)? - f(&minus)?) / (2.0 * fd_step);
            grad.data_mut()[idx] = slope;
        }
        if key == INPUT_KEY {
            input = Some(grad);
        } else {
            params.insert(key, grad);
        }
    }
    Ok(GradientBundle { params, input })
}

fn unknown_key(key: &ParamKey) -> MhcError {
    MhcError::invalid(format!("unknown parameter key {key}"))
}

fn mapping_alpha(p: &MappingParams, name: &str) -> Option<f64> {
    match name {
        "alpha_pre" => Some(p.alpha_pre),
        "alpha_post" => Some(p.alpha_post),
        "alpha_res" => Some(p.alpha_res),
        _ => None,
    }
}

fn mapping_alpha_mut<'a>(p: &'a mut MappingParams, name: &str) -> Option<&'a mut f64> {
    match name {
        "alpha_pre" => Some(&mut p.alpha_pre),
        "alpha_post" => Some(&mut p.alpha_post),
        "alpha_res" => Some(&mut p.alpha_res),
        _ => None,
    }
}

fn mapping_field<'a>(p: &'a MappingParams, name: &str) -> Option<&'a Matrix> {
    match name {
        "proj_pre" => Some(&p.proj_pre),
        "proj_post" => Some(&p.proj_post),
        "proj_res" => Some(&p.proj_res),
        "bias_pre" => Some(&p.bias_pre),
        "bias_post" => Some(&p.bias_post),
        "bias_res" => Some(&p.bias_res),
        _ => None,
    }
}

fn mapping_field_mut<'a>(p: &'a mut MappingParams, name: &str) -> Option<&'a mut Matrix> {
    match name {
        "proj_pre" => Some(&mut p.proj_pre),
        "proj_post" => Some(&mut p.proj_post),
        "proj_res" => Some(&mut p.proj_res),
        "bias_pre" => Some(&mut p.bias_pre),
        "bias_post" => Some(&mut p.bias_post),
        "bias_res" => Some(&mut p.bias_res),
        _ => None,
    }
}

fn layer_fn_field<'a>(f: &'a LayerFunction, name: &str) -> Option<&'a Matrix> {
    match (f, name) {
        (LayerFunction::Linear { w }, "f_w") => Some(w),
        (LayerFunction::MlpPrenorm { w1, .. }, "f_w1") => Some(w1),
        (LayerFunction::MlpPrenorm { w2, .. }, "f_w2") => Some(w2),
        (LayerFunction::ToyAttention { wq, .. }, "f_wq") => Some(wq),
        (LayerFunction::ToyAttention { wk, .. }, "f_wk") => Some(wk),
        (LayerFunction::ToyAttention { wv, .. }, "f_wv") => Some(wv),
        _ => None,
    }
}

fn layer_fn_field_mut<'a>(f: &'a mut LayerFunction, name: &str) -> Option<&'a mut Matrix> {
    match (f, name) {
        (LayerFunction::Linear { w }, "f_w") => Some(w),
        (LayerFunction::MlpPrenorm { w1, .. }, "f_w1") => Some(w1),
        (LayerFunction::MlpPrenorm { w2, .. }, "f_w2") => Some(w2),
        (LayerFunction::ToyAttention { wq, .. }, "f_wq") => Some(wq),
        (LayerFunction::ToyAttention { wk, .. }, "f_wk") => Some(wk),
        (LayerFunction::ToyAttention { wv, .. }, "f_wv") => Some(wv),
        _ => None,
    }
}

fn flat_get(m: &Matrix, idx: usize) -> Result<f64> {
    m.data().get(idx).copied().ok_or(MhcError::IndexOutOfBounds {
        row: idx / m.cols().max(1),
        col: idx % m.cols().max(1),
        rows: m.rows(),
        cols: m.cols(),
    })
}

fn flat_set(m: &mut Matrix, idx: usize, value: f64) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    match m.data_mut().get_mut(idx) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(MhcError::IndexOutOfBounds {
            row: idx / cols.max(1),
            col: idx % cols.max(1),
            rows,
            cols,
        }),
    }
}

const MAPPING_SCALAR_NAMES: [&str; 3] = ["alpha_pre", "alpha_post", "alpha_res"];
const MAPPING_FIELD_NAMES: [&str; 6] = [
    "proj_pre", "proj_post", "proj_res", "bias_pre", "bias_post", "bias_res",
];

impl ParamAccess for StackConfig {
    fn param_shapes(&self) -> Vec<(ParamKey, usize, usize)> {
        let mut out = Vec::new();
        for (l, entry) in self.layers.iter().enumerate() {
            for name in MAPPING_SCALAR_NAMES {
                out.push((ParamKey::layer(l, name), 1, 1));
            }
            for name in MAPPING_FIELD_NAMES {
                let m = mapping_field(&entry.mapping, name).expect("known field");
                out.push((ParamKey::layer(l, name), m.rows(), m.cols()));
            }
            let fn_names: &[&'static str] = match &entry.layer_fn {
                LayerFunction::Zero { .. } => &[],
                LayerFunction::Linear { .. } => &["f_w"],
                LayerFunction::MlpPrenorm { .. } => &["f_w1", "f_w2"],
                LayerFunction::ToyAttention { .. } => &["f_wq", "f_wk", "f_wv"],
            };
            for name in fn_names {
                let m = layer_fn_field(&entry.layer_fn, name).expect("known field");
                out.push((ParamKey::layer(l, name), m.rows(), m.cols()));
            }
        }
        out
    }

    fn param_get(&self, key: &ParamKey, idx: usize) -> Result<f64> {
        let l = key.layer.ok_or_else(|| unknown_key(key))?;
        let entry = self.layers.get(l).ok_or_else(|| unknown_key(key))?;
        if let Some(a) = mapping_alpha(&entry.mapping, key.name) {
            if idx != 0 {
                return Err(MhcError::IndexOutOfBounds {
                    row: 0,
                    col: idx,
                    rows: 1,
                    cols: 1,
                });
            }
            return Ok(a);
        }
        let m = mapping_field(&entry.mapping, key.name)
            .or_else(|| layer_fn_field(&entry.layer_fn, key.name))
            .ok_or_else(|| unknown_key(key))?;
        flat_get(m, idx)
    }

    fn param_set(&mut self, key: &ParamKey, idx: usize, value: f64) -> Result<()> {
        let l = key.layer.ok_or_else(|| unknown_key(key))?;
        let entry = self.layers.get_mut(l).ok_or_else(|| unknown_key(key))?;
        if let Some(a) = mapping_alpha_mut(&mut entry.mapping, key.name) {
            if idx != 0 {
                return Err(MhcError::IndexOutOfBounds {
                    row: 0,
                    col: idx,
                    rows: 1,
                    cols: 1,
                });
            }
            *a = value;
            return Ok(());
        }
        if let Some(m) = mapping_field_mut(&mut entry.mapping, key.name) {
            return flat_set(m, idx, value);
        }
        if let Some(m) = layer_fn_field_mut(&mut entry.layer_fn, key.name) {
            return flat_set(m, idx, value);
        }
        Err(unknown_key(key))
    }
}

/// A stack plus the `n x C` state it is applied to, so input gradients can
/// be finite-difference checked through the same interface.
#[derive(Debug, Clone)]
pub struct StackWithInput {
    pub stack: StackConfig,
    pub input: Matrix,
}

impl ParamAccess for StackWithInput {
    fn param_shapes(&self) -> Vec<(ParamKey, usize, usize)> {
        let mut out = self.stack.param_shapes();
        out.push((INPUT_KEY, self.input.rows(), self.input.cols()));
        out
    }

    fn param_get(&self, key: &ParamKey, idx: usize) -> Result<f64> {
        if *key == INPUT_KEY {
            return flat_get(&self.input, idx);
        }
        self.stack.param_get(key, idx)
    }

    fn param_set(&mut self, key: &ParamKey, idx: usize, value: f64) -> Result<()> {
        if *key == INPUT_KEY {
            return flat_set(&mut self.input, idx, value);
        }
        self.stack.param_set(key, idx, value)
    }
}

/// Node handles for one layer's three maps as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedMaps {
    pub h_pre: NodeId,
    pub h_post: NodeId,
    pub h_res: NodeId,
}

/// Node handles for a full taped stack pass: `states[0]` is the input state
/// and `states[depth()]` the output.
#[derive(Debug, Clone)]
pub struct TapedTrace {
    pub states: Vec<NodeId>,
    pub maps: Vec<TapedMaps>,
}

impl TapedTrace {
    pub fn output(&self) -> NodeId {
        *self.states.last().expect("trace holds at least the input")
    }
}

/// Registers every learnable tensor of the stack as a parameter leaf.
/// Returns the key-to-node map [`record_stack_forward`] consumes.
pub fn record_stack_params(
    tape: &mut Tape,
    cfg: &StackConfig,
) -> Result<BTreeMap<ParamKey, NodeId>> {
    cfg.validate()?;
    let mut leaves = BTreeMap::new();
    for (l, entry) in cfg.layers.iter().enumerate() {
        let p = &entry.mapping;
        for (name, value) in [
            ("alpha_pre", p.alpha_pre),
            ("alpha_post", p.alpha_post),
            ("alpha_res", p.alpha_res),
        ] {
            let key = ParamKey::layer(l, name);
            leaves.insert(key, tape.scalar_param(key, value)?);
        }
        for name in MAPPING_FIELD_NAMES {
            let key = ParamKey::layer(l, name);
            let m = mapping_field(p, name).expect("known field");
            leaves.insert(key, tape.param(key, m.clone())?);
        }
        let fn_fields: &[&'static str] = match &entry.layer_fn {
            LayerFunction::Zero { .. } => &[],
            LayerFunction::Linear { .. } => &["f_w"],
            LayerFunction::MlpPrenorm { .. } => &["f_w1", "f_w2"],
            LayerFunction::ToyAttention { .. } => &["f_wq", "f_wk", "f_wv"],
        };
        for name in fn_fields {
            let key = ParamKey::layer(l, name);
            let m = layer_fn_field(&entry.layer_fn, name).expect("known field");
            leaves.insert(key, tape.param(key, m.clone())?);
        }
    }
    Ok(leaves)
}

fn leaf(leaves: &BTreeMap<ParamKey, NodeId>, key: ParamKey) -> Result<NodeId> {
    leaves
        .get(&key)
        .copied()
        .ok_or_else(|| MhcError::invalid(format!("parameter {key} was not recorded on the tape")))
}

/// Records one layer's mapping computation and returns the three map nodes,
/// mirroring `compute_mappings` kernel for kernel. Baseline and
/// single-stream constrained mappings are recorded as unit constants, which
/// is exactly what the pure path returns for them.
fn record_mappings(
    tape: &mut Tape,
    leaves: &BTreeMap<ParamKey, NodeId>,
    l: usize,
    p: &MappingParams,
    x: NodeId,
) -> Result<TapedMaps> {
    let unit = |tape: &mut Tape| -> TapedMaps {
        let one = tape.constant(Matrix::filled(1, 1, 1.0));
        TapedMaps {
            h_pre: one,
            h_post: one,
            h_res: one,
        }
    };
    match p.variant {
        Variant::Baseline => Ok(unit(tape)),
        Variant::Mhc if p.n == 1 => Ok(unit(tape)),
        Variant::Hc => {
            let xnorm = tape.rmsnorm_rows(x, DEFAULT_RMS_EPSILON);
            let xnorm_t = tape.transpose(xnorm);
            let gate = |tape: &mut Tape,
                            proj: &'static str,
                            alpha: &'static str,
                            bias: &'static str|
             -> Result<NodeId> {
                let proj = leaf(leaves, ParamKey::layer(l, proj))?;
                let alpha = leaf(leaves, ParamKey::layer(l, alpha))?;
                let bias = leaf(leaves, ParamKey::layer(l, bias))?;
                let z = tape.matmul(proj, xnorm_t)?;
                let t = tape.tanh(z);
                let s = tape.mul_scalar(t, alpha)?;
                tape.add(s, bias)
            };
            Ok(TapedMaps {
                h_pre: gate(tape, "proj_pre", "alpha_pre", "bias_pre")?,
                h_post: gate(tape, "proj_post", "alpha_post", "bias_post")?,
                h_res: gate(tape, "proj_res", "alpha_res", "bias_res")?,
            })
        }
        Variant::Mhc => {
            let n = p.n;
            let flat = tape.reshape(x, 1, n * p.c)?;
            let normed = tape.rmsnorm_rows(flat, DEFAULT_RMS_EPSILON);

            let readout = |tape: &mut Tape, proj: &'static str, alpha: &'static str| -> Result<NodeId> {
                let proj = leaf(leaves, ParamKey::layer(l, proj))?;
                let alpha = leaf(leaves, ParamKey::layer(l, alpha))?;
                let z = tape.matmul(normed, proj)?;
                tape.mul_scalar(z, alpha)
            };

            let pre_scaled = readout(tape, "proj_pre", "alpha_pre")?;
            let bias_pre = leaf(leaves, ParamKey::layer(l, "bias_pre"))?;
            let pre_tilde = tape.add(pre_scaled, bias_pre)?;
            let h_pre = tape.sigmoid(pre_tilde);

            let post_scaled = readout(tape, "proj_post", "alpha_post")?;
            let bias_post = leaf(leaves, ParamKey::layer(l, "bias_post"))?;
            let post_tilde = tape.add(post_scaled, bias_post)?;
            let post_sig = tape.sigmoid(post_tilde);
            let h_post = tape.scale_const(post_sig, 2.0);

            let res_scaled = readout(tape, "proj_res", "alpha_res")?;
            let res_square = tape.reshape(res_scaled, n, n)?;
            let bias_res = leaf(leaves, ParamKey::layer(l, "bias_res"))?;
            let res_tilde = tape.add(res_square, bias_res)?;
            let h_res = tape.sinkhorn(res_tilde, &p.sinkhorn)?;

            Ok(TapedMaps {
                h_pre,
                h_post,
                h_res,
            })
        }
    }
}

/// Records one layer function application on the `1 x C` pre-mapped input.
fn record_layer_fn(
    tape: &mut Tape,
    leaves: &BTreeMap<ParamKey, NodeId>,
    l: usize,
    f: &LayerFunction,
    x: NodeId,
) -> Result<NodeId> {
    match f {
        LayerFunction::Zero { width } => Ok(tape.constant(Matrix::zeros(1, *width))),
        LayerFunction::Linear { .. } => {
            let w = leaf(leaves, ParamKey::layer(l, "f_w"))?;
            tape.matmul(x, w)
        }
        LayerFunction::MlpPrenorm { .. } => {
            let w1 = leaf(leaves, ParamKey::layer(l, "f_w1"))?;
            let w2 = leaf(leaves, ParamKey::layer(l, "f_w2"))?;
            let normed = tape.rmsnorm_rows(x, DEFAULT_RMS_EPSILON);
            let hidden_raw = tape.matmul(normed, w1)?;
            let hidden = tape.gelu(hidden_raw);
            tape.matmul(hidden, w2)
        }
        LayerFunction::ToyAttention { wq, .. } => {
            let d = wq.rows();
            let wq = leaf(leaves, ParamKey::layer(l, "f_wq"))?;
            let wk = leaf(leaves, ParamKey::layer(l, "f_wk"))?;
            let wv = leaf(leaves, ParamKey::layer(l, "f_wv"))?;
            let r = tape.reshape(x, ATTN_CHUNKS, d)?;
            let q = tape.matmul(r, wq)?;
            let k = tape.matmul(r, wk)?;
            let v = tape.matmul(r, wv)?;
            let kt = tape.transpose(k);
            let scores_raw = tape.matmul(q, kt)?;
            let scores = tape.scale_const(scores_raw, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            let out = tape.matmul(attn, v)?;
            tape.reshape(out, 1, ATTN_CHUNKS * d)
        }
    }
}

/// Records the full stack pass starting from the node `x0` (an `n x C`
/// state). Ablated maps are recorded as their fixed constant replacements;
/// their parameter leaves stay on the tape and receive zero gradients.
pub fn record_stack_forward(
    tape: &mut Tape,
    cfg: &StackConfig,
    leaves: &BTreeMap<ParamKey, NodeId>,
    x0: NodeId,
) -> Result<TapedTrace> {
    cfg.validate()?;
    let state_shape = (tape.value(x0).rows(), tape.value(x0).cols());
    if state_shape != (cfg.n, cfg.c) {
        return Err(MhcError::ShapeMismatch {
            op: "record_stack_forward",
            a_rows: state_shape.0,
            a_cols: state_shape.1,
            b_rows: cfg.n,
            b_cols: cfg.c,
        });
    }

    let mut states = vec![x0];
    let mut maps = Vec::with_capacity(cfg.depth());
    for (l, entry) in cfg.layers.iter().enumerate() {
        let x = *states.last().expect("states never empty");
        let raw = record_mappings(tape, leaves, l, &entry.mapping, x)?;
        let ms = TapedMaps {
            h_pre: if cfg.ablation.use_pre {
                raw.h_pre
            } else {
                tape.constant(uniform_pre(cfg.n))
            },
            h_post: if cfg.ablation.use_post {
                raw.h_post
            } else {
                tape.constant(ones_post(cfg.n))
            },
            h_res: if cfg.ablation.use_res {
                raw.h_res
            } else {
                tape.constant(identity_res(cfg.n))
            },
        };

        let layer_in = tape.matmul(ms.h_pre, x)?;
        let fout = record_layer_fn(tape, leaves, l, &entry.layer_fn, layer_in)?;
        let mixed = tape.matmul(ms.h_res, x)?;
        let h_post_t = tape.transpose(ms.h_post);
        let written = tape.matmul(h_post_t, fout)?;
        let next = tape.add(mixed, written)?;

        states.push(next);
        maps.push(ms);
    }
    Ok(TapedTrace { states, maps })
}

/// Records the per-entry mean squared error against a constant target:
/// `sum((pred - target)^2) * (1 / len)`.
pub fn record_mse_loss(tape: &mut Tape, pred: NodeId, target: &Matrix) -> Result<NodeId> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.hadamard(diff, diff)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale_const(s, 1.0 / target.len() as f64))
}

/// Pure counterpart of [`record_mse_loss`]; uses the same kernels in the
/// same order so the two produce bitwise-equal values.
pub fn mse_scalar(pred: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = pred.sub(target)?;
    let sq = diff.hadamard(&diff)?;
    Ok(sq.sum() * (1.0 / target.len() as f64))
}

/// Averages scalar loss nodes: left-fold sum, then one scale.
pub fn record_mean_loss(tape: &mut Tape, losses: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = losses.split_first() else {
        return Err(MhcError::invalid("mean loss needs at least one term"));
    };
    let mut acc = first;
    for &l in rest {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale_const(acc, 1.0 / losses.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{init_params, AblationMask, InitPolicy};
    use crate::rng::SeededRng;
    use crate::stream::{stack_forward, LayerEntry, LayerFnKind, StreamState};

    fn randomized_stack(
        variant: Variant,
        n: usize,
        c: usize,
        kinds: &[LayerFnKind],
        seed: u64,
    ) -> StackConfig {
        let mut rng = SeededRng::new(seed);
        let layers = kinds
            .iter()
            .enumerate()
            .map(|(l, &kind)| {
                let mut mapping =
                    init_params(variant, n, c, InitPolicy::ResidualEmulation, seed).unwrap();
                mapping.alpha_pre = rng.uniform(-0.4, 0.4);
                mapping.alpha_post = rng.uniform(-0.4, 0.4);
                mapping.alpha_res = rng.uniform(-0.4, 0.4);
                for m in [
                    &mut mapping.proj_pre,
                    &mut mapping.proj_post,
                    &mut mapping.proj_res,
                ] {
                    for v in m.data_mut() {
                        *v = rng.uniform(-0.5, 0.5);
                    }
                }
                for m in [&mut mapping.bias_pre, &mut mapping.bias_post] {
                    for v in m.data_mut() {
                        *v = rng.uniform(-0.8, 0.8);
                    }
                }
                for v in mapping.bias_res.data_mut() {
                    *v = rng.uniform(-0.8, 0.8);
                }
                LayerEntry {
                    mapping,
                    layer_fn: LayerFunction::init(kind, c, seed + 1000 + l as u64).unwrap(),
                }
            })
            .collect();
        StackConfig {
            variant,
            n,
            c,
            layers,
            ablation: AblationMask::default(),
        }
    }

    /// Pure loss used by the finite-difference reference: run the stack,
    /// reduce, and take per-entry MSE against the target.
    fn pure_loss(p: &StackWithInput, target: &Matrix) -> Result<f64> {
        let (out, _) = stack_forward(&StreamState::new(p.input.clone()), &p.stack)?;
        let pred = crate::stream::reduce(&out);
        mse_scalar(&pred, target)
    }

    /// Taped version of the same loss; returns the gradients.
    fn taped_loss(p: &StackWithInput, target: &Matrix) -> Result<(f64, GradientBundle)> {
        let mut tape = Tape::new();
        let leaves = record_stack_params(&mut tape, &p.stack)?;
        let x0 = tape.input(p.input.clone())?;
        let trace = record_stack_forward(&mut tape, &p.stack, &leaves, x0)?;
        let pred = tape.mean_rows(trace.output());
        let loss = record_mse_loss(&mut tape, pred, target)?;
        let value = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    fn assert_bundle_close(got: &GradientBundle, want: &GradientBundle, rtol: f64, atol: f64) {
        assert_eq!(
            got.params.keys().collect::<Vec<_>>(),
            want.params.keys().collect::<Vec<_>>()
        );
        for (key, g) in &got.params {
            let w = &want.params[key];
            for (a, b) in g.data().iter().zip(w.data()) {
                let tol = rtol * a.abs().max(b.abs()) + atol;
                assert!(
                    (a - b).abs() <= tol,
                    "{key}: gradient {a} vs reference {b} (tol {tol})"
                );
            }
        }
        match (&got.input, &want.input) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                for (a, b) in g.data().iter().zip(w.data()) {
                    let tol = rtol * a.abs().max(b.abs()) + atol;
                    assert!((a - b).abs() <= tol, "input: {a} vs {b}");
                }
            }
            _ => panic!("one bundle has an input gradient and the other does not"),
        }
    }

    #[test]
    fn param_keys_order_globals_before_layers() {
        let mut keys = vec![
            ParamKey::layer(1, "f_w"),
            ParamKey::global("head"),
            ParamKey::layer(0, "alpha_res"),
            ParamKey::layer(0, "alpha_pre"),
        ];
        keys.sort();
        assert_eq!(keys[0], ParamKey::global("head"));
        assert_eq!(keys[1], ParamKey::layer(0, "alpha_pre"));
        assert_eq!(keys[2], ParamKey::layer(0, "alpha_res"));
        assert_eq!(keys[3], ParamKey::layer(1, "f_w"));
        assert_eq!(ParamKey::layer(2, "f_w1").to_string(), "layer2.f_w1");
        assert_eq!(ParamKey::global("input").to_string(), "input");
    }

    #[test]
    fn param_access_roundtrips_every_declared_scalar() {
        let cfg = randomized_stack(
            Variant::Mhc,
            3,
            4,
            &[LayerFnKind::Linear, LayerFnKind::MlpPrenorm],
            11,
        );
        let mut copy = cfg.clone();
        for (key, rows, cols) in cfg.param_shapes() {
            for idx in 0..rows * cols {
                let v = cfg.param_get(&key, idx).unwrap();
                copy.param_set(&key, idx, v + 1.0).unwrap();
                assert_eq!(copy.param_get(&key, idx).unwrap(), v + 1.0);
                copy.param_set(&key, idx, v).unwrap();
            }
        }
        assert_eq!(copy, cfg);

        assert!(cfg.param_get(&ParamKey::layer(0, "nope"), 0).is_err());
        assert!(cfg.param_get(&ParamKey::layer(9, "f_w"), 0).is_err());
        assert!(cfg.param_get(&ParamKey::global("f_w"), 0).is_err());
        assert!(cfg.param_get(&ParamKey::layer(0, "alpha_pre"), 1).is_err());
        let (_, rows, cols) = cfg
            .param_shapes()
            .into_iter()
            .find(|(k, _, _)| *k == ParamKey::layer(0, "proj_res"))
            .unwrap();
        assert!(cfg
            .param_get(&ParamKey::layer(0, "proj_res"), rows * cols)
            .is_err());
    }

    #[test]
    fn shapes_cover_exactly_the_layer_function_weights_present() {
        let cfg = randomized_stack(
            Variant::Hc,
            2,
            8,
            &[LayerFnKind::Zero, LayerFnKind::ToyAttention],
            3,
        );
        let shapes = cfg.param_shapes();
        let names_l0: Vec<_> = shapes
            .iter()
            .filter(|(k, _, _)| k.layer == Some(0))
            .map(|(k, _, _)| k.name)
            .collect();
        assert!(!names_l0.contains(&"f_w"));
        let names_l1: Vec<_> = shapes
            .iter()
            .filter(|(k, _, _)| k.layer == Some(1))
            .map(|(k, _, _)| k.name)
            .collect();
        assert!(names_l1.contains(&"f_wq"));
        assert!(names_l1.contains(&"f_wk"));
        assert!(names_l1.contains(&"f_wv"));
    }

    #[test]
    fn gradient_norm_is_the_flat_euclidean_norm() {
        let mut params = BTreeMap::new();
        params.insert(ParamKey::layer(0, "f_w"), Matrix::row_vector(&[3.0]));
        params.insert(ParamKey::layer(1, "f_w"), Matrix::row_vector(&[4.0]));
        let bundle = GradientBundle {
            params,
            input: Some(Matrix::row_vector(&[100.0])),
        };
        // Input gradients are excluded.
        assert_eq!(gradient_norm(&bundle), 5.0);
        assert_eq!(bundle.norm(), 5.0);
    }

    #[test]
    fn finite_differences_recover_a_quadratic_slope() {
        // Loss alpha^2 has slope 2 alpha; at alpha = 3 the slope is 6.
        let mut cfg = randomized_stack(Variant::Hc, 2, 3, &[LayerFnKind::Zero], 5);
        cfg.param_set(&ParamKey::layer(0, "alpha_pre"), 0, 3.0)
            .unwrap();
        let bundle = finite_difference_gradient(
            |p: &StackConfig| {
                let a = p.param_get(&ParamKey::layer(0, "alpha_pre"), 0)?;
                Ok(a * a)
            },
            &cfg,
            1e-5,
        )
        .unwrap();
        let g = bundle.params[&ParamKey::layer(0, "alpha_pre")].get(0, 0);
        assert!((g - 6.0).abs() <= 1e-6, "slope {g}");
        // Everything the loss ignores gets a zero slope.
        assert_eq!(bundle.params[&ParamKey::layer(0, "bias_res")].max_abs(), 0.0);
        assert!(bundle.input.is_none());
    }

    #[test]
    fn finite_differences_route_the_input_key_to_the_input_slot() {
        let cfg = randomized_stack(Variant::Hc, 2, 3, &[LayerFnKind::Zero], 6);
        let p = StackWithInput {
            stack: cfg,
            input: Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
        };
        let bundle = finite_difference_gradient(
            |p: &StackWithInput| {
                let mut acc = 0.0;
                for v in p.input.data() {
                    acc += v * v;
                }
                Ok(acc)
            },
            &p,
            1e-5,
        )
        .unwrap();
        let g = bundle.input.expect("input gradient present");
        for (got, x) in g.data().iter().zip(p.input.data()) {
            assert!((got - 2.0 * x).abs() <= 1e-5, "{got} vs {}", 2.0 * x);
        }
    }

    #[test]
    fn taped_forward_is_bitwise_equal_to_the_pure_forward() {
        let kinds = [
            LayerFnKind::Linear,
            LayerFnKind::MlpPrenorm,
            LayerFnKind::ToyAttention,
        ];
        for (variant, n) in [(Variant::Hc, 4), (Variant::Mhc, 4), (Variant::Mhc, 1)] {
            let cfg = randomized_stack(variant, n, 8, &kinds, 40);
            let mut rng = SeededRng::new(41);
            let x0 = rng.matrix_uniform(n, 8, -1.0, 1.0);
            let target = rng.matrix_uniform(1, 8, -1.0, 1.0);

            let (pure_out, _) = stack_forward(&StreamState::new(x0.clone()), &cfg).unwrap();
            let pure_pred = crate::stream::reduce(&pure_out);
            let pure = mse_scalar(&pure_pred, &target).unwrap();

            let p = StackWithInput {
                stack: cfg,
                input: x0,
            };
            let (taped, _) = taped_loss(&p, &target).unwrap();
            assert_eq!(pure.to_bits(), taped.to_bits(), "variant {variant} n {n}");
        }
    }

    #[test]
    fn taped_gradients_are_deterministic_across_recordings() {
        let cfg = randomized_stack(
            Variant::Mhc,
            3,
            4,
            &[LayerFnKind::Linear, LayerFnKind::MlpPrenorm],
            42,
        );
        let mut rng = SeededRng::new(43);
        let p = StackWithInput {
            stack: cfg,
            input: rng.matrix_uniform(3, 4, -1.0, 1.0),
        };
        let target = rng.matrix_uniform(1, 4, -1.0, 1.0);
        let (v1, g1) = taped_loss(&p, &target).unwrap();
        let (v2, g2) = taped_loss(&p, &target).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (key, a) in &g1.params {
            let b = &g2.params[key];
            assert_eq!(a.data(), b.data(), "{key}");
        }
        assert_eq!(g1.input.unwrap().data(), g2.input.unwrap().data());
    }

    #[test]
    fn hc_stack_gradients_match_finite_differences() {
        let cfg = randomized_stack(
            Variant::Hc,
            2,
            4,
            &[LayerFnKind::Linear, LayerFnKind::MlpPrenorm],
            51,
        );
        let mut rng = SeededRng::new(52);
        let p = StackWithInput {
            stack: cfg,
            input: rng.matrix_uniform(2, 4, -1.0, 1.0),
        };
        let target = rng.matrix_uniform(1, 4, -1.0, 1.0);
        let (_, taped) = taped_loss(&p, &target).unwrap();
        let fd = finite_difference_gradient(|q| pure_loss(q, &target), &p, 1e-5).unwrap();
        assert_bundle_close(&taped, &fd, 1e-5, 1e-8);
    }

    #[test]
    fn mhc_stack_gradients_match_finite_differences() {
        // Differentiates through three unrolled Sinkhorn projections.
        let cfg = randomized_stack(
            Variant::Mhc,
            3,
            4,
            &[
                LayerFnKind::Linear,
                LayerFnKind::ToyAttention,
                LayerFnKind::MlpPrenorm,
            ],
            61,
        );
        let mut rng = SeededRng::new(62);
        let p = StackWithInput {
            stack: cfg,
            input: rng.matrix_uniform(3, 4, -1.0, 1.0),
        };
        let target = rng.matrix_uniform(1, 4, -1.0, 1.0);
        let (_, taped) = taped_loss(&p, &target).unwrap();
        let fd = finite_difference_gradient(|q| pure_loss(q, &target), &p, 1e-5).unwrap();
        assert_bundle_close(&taped, &fd, 1e-5, 1e-8);
    }

    #[test]
    fn ablated_maps_leave_their_parameters_with_zero_gradients() {
        let mut cfg = randomized_stack(Variant::Mhc, 3, 4, &[LayerFnKind::Linear], 71);
        cfg.ablation = AblationMask {
            use_pre: true,
            use_post: true,
            use_res: false,
        };
        let mut rng = SeededRng::new(72);
        let p = StackWithInput {
            stack: cfg,
            input: rng.matrix_uniform(3, 4, -1.0, 1.0),
        };
        let target = rng.matrix_uniform(1, 4, -1.0, 1.0);
        let (_, taped) = taped_loss(&p, &target).unwrap();
        // The residual-mix parameters feed a discarded branch.
        assert_eq!(taped.params[&ParamKey::layer(0, "proj_res")].max_abs(), 0.0);
        assert_eq!(taped.params[&ParamKey::layer(0, "bias_res")].max_abs(), 0.0);
        // The enabled pre-map still learns.
        assert!(taped.params[&ParamKey::layer(0, "bias_pre")].max_abs() > 0.0);
        // And the whole bundle still matches finite differences.
        let fd = finite_difference_gradient(|q| pure_loss(q, &target), &p, 1e-5).unwrap();
        assert_bundle_close(&taped, &fd, 1e-5, 1e-8);
    }

    #[test]
    fn mean_loss_averages_scalar_terms() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::filled(1, 1, 1.0));
        let b = tape.constant(Matrix::filled(1, 1, 2.0));
        let c = tape.constant(Matrix::filled(1, 1, 6.0));
        let mean = record_mean_loss(&mut tape, &[a, b, c]).unwrap();
        assert_eq!(tape.value(mean).get(0, 0), 3.0);
        assert!(record_mean_loss(&mut tape, &[]).is_err());
    }
}
