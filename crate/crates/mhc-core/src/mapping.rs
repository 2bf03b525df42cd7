//! Mapping parameterizations: how a layer's pre/post/residual mixing maps
//! are computed from the live stream state.
//!
//! Three variants exist. `baseline` fixes all maps at 1 (the plain residual
//! update). `hc` computes unconstrained maps from per-stream normalized
//! input via tanh gates. `mhc` flattens the whole state into one vector,
//! normalizes it once, and pushes the three linear readouts through range
//! constraints: sigmoid for the pre-map, twice-sigmoid for the post-map, and
//! the Sinkhorn projection for the residual-mixing matrix, which is what
//! keeps stream mixing doubly stochastic.
//!
//! All maps are recomputed from the current input at every layer; a static
//! configuration is just the special case of zero projection weights.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};
use crate::matrix::{self, Matrix, DEFAULT_RMS_EPSILON};
use crate::sinkhorn::{sinkhorn_project, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Hc,
    Mhc,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Hc => "hc",
            Variant::Mhc => "mhc",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = MhcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "hc" => Ok(Variant::Hc),
            "mhc" => Ok(Variant::Mhc),
            other => Err(MhcError::invalid(format!(
                "unknown variant {other:?}; expected baseline, hc, or mhc"
            ))),
        }
    }
}

/// Bias initialization policies for [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Biases chosen so a fresh stack behaves like a plain residual network:
    /// the residual mix hugs the identity and the pre/post maps read and
    /// write stream 0.
    ResidualEmulation,
    /// All biases zero. Under mhc constraints this yields uniform maps;
    /// provided for ablations.
    Uniform,
}

impl std::str::FromStr for InitPolicy {
    type Err = MhcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual-emulation" => Ok(InitPolicy::ResidualEmulation),
            "uniform" => Ok(InitPolicy::Uniform),
            other => Err(MhcError::invalid(format!(
                "unknown init policy {other:?}; expected residual-emulation or uniform"
            ))),
        }
    }
}

/// Learnable per-layer mapping parameters.
///
/// Shapes depend on the variant. For `hc` the projections read the per-row
/// normalized state: `proj_pre`/`proj_post` are `1 x C` and `proj_res` is
/// `n x C`. For `mhc` they read the flattened state: `proj_pre`/`proj_post`
/// are `nC x n` and `proj_res` is `nC x n^2`. `baseline` carries the mhc
/// shapes at n = 1 so checkpoints stay uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub alpha_res: f64,
    pub proj_pre: Matrix,
    pub proj_post: Matrix,
    pub proj_res: Matrix,
    pub bias_pre: Matrix,
    pub bias_post: Matrix,
    pub bias_res: Matrix,
    pub sinkhorn: SinkhornConfig,
}

/// The three maps a layer consumes: `h_pre` is `1 x n`, `h_post` is `1 x n`,
/// `h_res` is `n x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingSet {
    pub h_pre: Matrix,
    pub h_post: Matrix,
    pub h_res: Matrix,
}

/// Which maps stay learnable. A disabled map is replaced by its fixed
/// counterpart: uniform averaging for pre, all-ones for post, identity for
/// the residual mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub use_pre: bool,
    pub use_post: bool,
    pub use_res: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask {
            use_pre: true,
            use_post: true,
            use_res: true,
        }
    }
}

impl AblationMask {
    pub fn all_enabled(&self) -> bool {
        self.use_pre && self.use_post && self.use_res
    }
}

/// Fixed pre-map used when the learnable pre-map is ablated: uniform
/// averaging over streams.
pub fn uniform_pre(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0 / n as f64)
}

/// Fixed post-map used when the learnable post-map is ablated: broadcast to
/// every stream.
pub fn ones_post(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0)
}

/// Fixed residual mix used when the learnable mix is ablated.
pub fn identity_res(n: usize) -> Matrix {
    Matrix::identity(n)
}

/// The degenerate single-stream maps: everything is the scalar 1, which
/// reduces the layer update to `x + F(x)`.
fn unit_maps() -> MappingSet {
    MappingSet {
        h_pre: Matrix::filled(1, 1, 1.0),
        h_post: Matrix::filled(1, 1, 1.0),
        h_res: Matrix::filled(1, 1, 1.0),
    }
}

impl MappingParams {
    pub fn validate(&self) -> Result<()> {
        let (n, c) = (self.n, self.c);
        if n == 0 || c == 0 {
            return Err(MhcError::invalid("n and C must be positive"));
        }
        if self.variant == Variant::Baseline && n != 1 {
            return Err(MhcError::invalid(format!(
                "baseline variant requires n = 1, got n = {n}"
            )));
        }
        self.sinkhorn.validate()?;
        let expect = |m: &Matrix, rows: usize, cols: usize, name: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(MhcError::invalid(format!(
                    "{name} must be {rows}x{cols} for variant {}, got {}x{}",
                    self.variant,
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        match self.variant {
            Variant::Hc => {
                expect(&self.proj_pre, 1, c, "proj_pre")?;
                expect(&self.proj_post, 1, c, "proj_post")?;
                expect(&self.proj_res, n, c, "proj_res")?;
            }
            Variant::Mhc | Variant::Baseline => {
                expect(&self.proj_pre, n * c, n, "proj_pre")?;
                expect(&self.proj_post, n * c, n, "proj_post")?;
                expect(&self.proj_res, n * c, n * n, "proj_res")?;
            }
        }
        expect(&self.bias_pre, 1, n, "bias_pre")?;
        expect(&self.bias_post, 1, n, "bias_post")?;
        expect(&self.bias_res, n, n, "bias_res")?;
        for alpha in [self.alpha_pre, self.alpha_post, self.alpha_res] {
            if !alpha.is_finite() {
                return Err(MhcError::invalid("alpha gates must be finite"));
            }
        }
        Ok(())
    }
}

/// Builds fresh parameters. Gates start at 0.01 and all projections at zero,
/// so the initial maps are purely bias-driven; `policy` picks the biases.
/// `seed` is reserved for stochastic policies; both current policies are
/// deterministic.
pub fn init_params(
    variant: Variant,
    n: usize,
    c: usize,
    policy: InitPolicy,
    _seed: u64,
) -> Result<MappingParams> {
    if n == 0 || c == 0 {
        return Err(MhcError::invalid("n and C must be positive"));
    }
    if variant == Variant::Baseline && n != 1 {
        return Err(MhcError::invalid(format!(
            "baseline variant requires n = 1, got n = {n}"
        )));
    }

    let (proj_pre, proj_post, proj_res) = match variant {
        Variant::Hc => (
            Matrix::zeros(1, c),
            Matrix::zeros(1, c),
            Matrix::zeros(n, c),
        ),
        Variant::Mhc | Variant::Baseline => (
            Matrix::zeros(n * c, n),
            Matrix::zeros(n * c, n),
            Matrix::zeros(n * c, n * n),
        ),
    };

    let (bias_pre, bias_post, bias_res) = match policy {
        InitPolicy::Uniform => (
            Matrix::zeros(1, n),
            Matrix::zeros(1, n),
            Matrix::zeros(n, n),
        ),
        InitPolicy::ResidualEmulation => match variant {
            // Constrained variant: saturate the sigmoids toward reading and
            // writing stream 0, and push the Sinkhorn input toward the
            // identity with a +6 diagonal.
            Variant::Mhc | Variant::Baseline => {
                let bias_pre = Matrix::from_fn(1, n, |_, j| if j == 0 { 6.0 } else { -6.0 });
                let bias_post = Matrix::from_fn(1, n, |_, j| if j == 0 { 0.0 } else { -6.0 });
                let bias_res = Matrix::identity(n).scale(6.0);
                (bias_pre, bias_post, bias_res)
            }
            // Unconstrained variant: the fixed points can be hit exactly.
            Variant::Hc => {
                let bias_pre = Matrix::from_fn(1, n, |_, j| if j == 0 { 1.0 } else { 0.0 });
                let bias_post = bias_pre.clone();
                (bias_pre.clone(), bias_post, Matrix::identity(n))
            }
        },
    };

    let params = MappingParams {
        variant,
        n,
        c,
        alpha_pre: 0.01,
        alpha_post: 0.01,
        alpha_res: 0.01,
        proj_pre,
        proj_post,
        proj_res,
        bias_pre,
        bias_post,
        bias_res,
        sinkhorn: SinkhornConfig::default(),
    };
    params.validate()?;
    Ok(params)
}

fn check_input(x: &Matrix, p: &MappingParams, op: &'static str) -> Result<()> {
    if x.rows() != p.n || x.cols() != p.c {
        return Err(MhcError::ShapeMismatch {
            op,
            a_rows: x.rows(),
            a_cols: x.cols(),
            b_rows: p.n,
            b_cols: p.c,
        });
    }
    Ok(())
}

/// Unconstrained maps from per-stream normalized input:
/// `h = alpha * tanh(proj . xnorm^T) + bias` for each of the three maps.
pub fn compute_mappings_hc(x: &Matrix, p: &MappingParams) -> Result<MappingSet> {
    p.validate()?;
    if p.variant != Variant::Hc {
        return Err(MhcError::invalid(format!(
            "compute_mappings_hc called with variant {}",
            p.variant
        )));
    }
    check_input(x, p, "compute_mappings_hc")?;

    let xnorm_t = matrix::rmsnorm(x, DEFAULT_RMS_EPSILON).transpose();
    let gate = |proj: &Matrix, alpha: f64, bias: &Matrix| -> Result<Matrix> {
        matrix::tanh(&matmul_checked(proj, &xnorm_t)?)
            .scale(alpha)
            .add(bias)
    };
    Ok(MappingSet {
        h_pre: gate(&p.proj_pre, p.alpha_pre, &p.bias_pre)?,
        h_post: gate(&p.proj_post, p.alpha_post, &p.bias_post)?,
        h_res: gate(&p.proj_res, p.alpha_res, &p.bias_res)?,
    })
}

fn matmul_checked(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matrix::matmul(a, b)
}

/// Constrained maps from the flattened, whole-vector normalized input.
///
/// At n = 1 the update degenerates to the plain residual connection and all
/// three maps are the exact scalar 1; the range constraints below apply for
/// n >= 2.
pub fn compute_mappings_mhc(x: &Matrix, p: &MappingParams) -> Result<MappingSet> {
    p.validate()?;
    if !matches!(p.variant, Variant::Mhc | Variant::Baseline) {
        return Err(MhcError::invalid(format!(
            "compute_mappings_mhc called with variant {}",
            p.variant
        )));
    }
    check_input(x, p, "compute_mappings_mhc")?;
    if p.variant == Variant::Baseline || p.n == 1 {
        return Ok(unit_maps());
    }

    let flat = x.flatten_row();
    let normed = matrix::rmsnorm(&flat, DEFAULT_RMS_EPSILON);

    let pre_tilde = matmul_checked(&normed, &p.proj_pre)?
        .scale(p.alpha_pre)
        .add(&p.bias_pre)?;
    let post_tilde = matmul_checked(&normed, &p.proj_post)?
        .scale(p.alpha_post)
        .add(&p.bias_post)?;
    let res_tilde = matmul_checked(&normed, &p.proj_res)?
        .scale(p.alpha_res)
        .reshape(p.n, p.n)?
        .add(&p.bias_res)?;

    Ok(MappingSet {
        h_pre: matrix::sigmoid(&pre_tilde),
        h_post: matrix::sigmoid(&post_tilde).scale(2.0),
        h_res: sinkhorn_project(&res_tilde, &p.sinkhorn)?,
    })
}

/// Fused evaluation of the mhc maps: one matrix product against the
/// horizontally stacked projections on the *unnormalized* flattened input,
/// followed by a single scalar correction `1/r` with
/// `r = sqrt(mean(x^2) + epsilon)`.
///
/// Equivalent to [`compute_mappings_mhc`] because rms normalization is a
/// scalar multiple of the input: `(x/r) . proj = (x . proj) / r`. Sharing
/// the epsilon convention keeps the two paths equal at x = 0 as well.
pub fn compute_mappings_mhc_fused(x: &Matrix, p: &MappingParams) -> Result<MappingSet> {
    p.validate()?;
    if !matches!(p.variant, Variant::Mhc | Variant::Baseline) {
        return Err(MhcError::invalid(format!(
            "compute_mappings_mhc_fused called with variant {}",
            p.variant
        )));
    }
    check_input(x, p, "compute_mappings_mhc_fused")?;
    if p.variant == Variant::Baseline || p.n == 1 {
        return Ok(unit_maps());
    }

    let n = p.n;
    let flat = x.flatten_row();
    let r = matrix::rms_values(&flat, DEFAULT_RMS_EPSILON)[0];

    // Stacked readout [proj_pre | proj_post | proj_res], one scan over x.
    let width = n * n + 2 * n;
    let stacked = Matrix::from_fn(n * p.c, width, |i, j| {
        if j < n {
            p.proj_pre.get(i, j)
        } else if j < 2 * n {
            p.proj_post.get(i, j - n)
        } else {
            p.proj_res.get(i, j - 2 * n)
        }
    });
    let t = matmul_checked(&flat, &stacked)?;

    let slice = |lo: usize, len: usize| -> Matrix {
        Matrix::from_fn(1, len, |_, j| t.get(0, lo + j))
    };
    let pre_tilde = slice(0, n).scale(p.alpha_pre / r).add(&p.bias_pre)?;
    let post_tilde = slice(n, n).scale(p.alpha_post / r).add(&p.bias_post)?;
    let res_tilde = slice(2 * n, n * n)
        .scale(p.alpha_res / r)
        .reshape(n, n)?
        .add(&p.bias_res)?;

    Ok(MappingSet {
        h_pre: matrix::sigmoid(&pre_tilde),
        h_post: matrix::sigmoid(&post_tilde).scale(2.0),
        h_res: sinkhorn_project(&res_tilde, &p.sinkhorn)?,
    })
}

/// Dispatches on the parameter variant. Baseline always yields the unit
/// maps.
pub fn compute_mappings(x: &Matrix, p: &MappingParams) -> Result<MappingSet> {
    match p.variant {
        Variant::Baseline => {
            p.validate()?;
            check_input(x, p, "compute_mappings")?;
            Ok(unit_maps())
        }
        Variant::Hc => compute_mappings_hc(x, p),
        Variant::Mhc => compute_mappings_mhc(x, p),
    }
}

/// Replaces disabled maps with their fixed counterparts.
pub fn apply_ablation(ms: &MappingSet, mask: &AblationMask, n: usize) -> MappingSet {
    MappingSet {
        h_pre: if mask.use_pre {
            ms.h_pre.clone()
        } else {
            uniform_pre(n)
        },
        h_post: if mask.use_post {
            ms.h_post.clone()
        } else {
            ones_post(n)
        },
        h_res: if mask.use_res {
            ms.h_res.clone()
        } else {
            identity_res(n)
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::sinkhorn::ds_diagnostics;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {a} and {b} to agree within {tol}"
        );
    }

    fn randomized(p: &mut MappingParams, rng: &mut SeededRng) {
        p.alpha_pre = rng.uniform(-0.5, 0.5);
        p.alpha_post = rng.uniform(-0.5, 0.5);
        p.alpha_res = rng.uniform(-0.5, 0.5);
        for m in [&mut p.proj_pre, &mut p.proj_post, &mut p.proj_res] {
            for v in m.data_mut() {
                *v = rng.uniform(-0.8, 0.8);
            }
        }
        for m in [&mut p.bias_pre, &mut p.bias_post, &mut p.bias_res] {
            for v in m.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
        }
    }

    #[test]
    fn hc_with_zero_projections_returns_the_biases() {
        let mut p = init_params(Variant::Hc, 4, 8, InitPolicy::ResidualEmulation, 0).unwrap();
        p.alpha_pre = 0.0;
        p.alpha_post = 0.0;
        p.alpha_res = 0.0;
        let x = Matrix::filled(4, 8, 0.3);
        let ms = compute_mappings_hc(&x, &p).unwrap();
        assert_eq!(ms.h_res, Matrix::identity(4));
        assert_eq!(ms.h_pre, Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(ms.h_post, Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn init_gates_start_at_hundredth() {
        for variant in [Variant::Baseline, Variant::Hc, Variant::Mhc] {
            let n = if variant == Variant::Baseline { 1 } else { 4 };
            let p = init_params(variant, n, 8, InitPolicy::ResidualEmulation, 0).unwrap();
            assert_eq!(p.alpha_pre, 0.01);
            assert_eq!(p.alpha_post, 0.01);
            assert_eq!(p.alpha_res, 0.01);
            assert_eq!(p.proj_res.max_abs(), 0.0);
        }
    }

    #[test]
    fn hc_matches_straight_line_evaluation() {
        let mut rng = SeededRng::new(7);
        let (n, c) = (3, 5);
        let mut p = init_params(Variant::Hc, n, c, InitPolicy::Uniform, 7).unwrap();
        randomized(&mut p, &mut rng);
        let x = rng.matrix_uniform(n, c, -2.0, 2.0);
        let ms = compute_mappings_hc(&x, &p).unwrap();

        // Straight-line second route, scalar loops only.
        let mut xnorm = vec![vec![0.0; c]; n];
        for i in 0..n {
            let ms_row: f64 = (0..c).map(|j| x.get(i, j) * x.get(i, j)).sum::<f64>() / c as f64;
            let r = (ms_row + DEFAULT_RMS_EPSILON).sqrt();
            for j in 0..c {
                xnorm[i][j] = x.get(i, j) / r;
            }
        }
        for s in 0..n {
            let mut acc = 0.0;
            for j in 0..c {
                acc += p.proj_pre.get(0, j) * xnorm[s][j];
            }
            let expect = p.alpha_pre * acc.tanh() + p.bias_pre.get(0, s);
            assert_close(ms.h_pre.get(0, s), expect, 1e-12);

            let mut acc_post = 0.0;
            for j in 0..c {
                acc_post += p.proj_post.get(0, j) * xnorm[s][j];
            }
            let expect_post = p.alpha_post * acc_post.tanh() + p.bias_post.get(0, s);
            assert_close(ms.h_post.get(0, s), expect_post, 1e-12);

            for t in 0..n {
                let mut acc_res = 0.0;
                for j in 0..c {
                    acc_res += p.proj_res.get(s, j) * xnorm[t][j];
                }
                let expect_res = p.alpha_res * acc_res.tanh() + p.bias_res.get(s, t);
                assert_close(ms.h_res.get(s, t), expect_res, 1e-12);
            }
        }
    }

    #[test]
    fn mhc_zero_biases_give_uniform_maps() {
        let mut p = init_params(Variant::Mhc, 4, 6, InitPolicy::Uniform, 0).unwrap();
        p.alpha_pre = 0.0;
        p.alpha_post = 0.0;
        p.alpha_res = 0.0;
        let mut rng = SeededRng::new(2);
        let x = rng.matrix_uniform(4, 6, -1.0, 1.0);
        let ms = compute_mappings_mhc(&x, &p).unwrap();
        for j in 0..4 {
            assert_eq!(ms.h_pre.get(0, j), 0.5);
            assert_eq!(ms.h_post.get(0, j), 1.0);
        }
        for &v in ms.h_res.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn mhc_residual_emulation_bias_dominates_the_mix_diagonal() {
        let p = init_params(Variant::Mhc, 4, 8, InitPolicy::ResidualEmulation, 0).unwrap();
        let ms = compute_mappings_mhc(&Matrix::zeros(4, 8), &p).unwrap();
        // Analytic limit of Sinkhorn on exp(6I) is diag e^6/(e^6+3); after the
        // fixed 20-iteration budget the projection sits within 1e-6 of it.
        let analytic = 6f64.exp() / (6f64.exp() + 3.0);
        for i in 0..4 {
            let d = ms.h_res.get(i, i);
            assert!(d > 0.9, "diagonal {d} not dominant");
            assert_close(d, analytic, 1e-6);
        }
    }

    #[test]
    fn single_stream_degenerates_to_unit_maps() {
        let mut rng = SeededRng::new(4);
        let mut p = init_params(Variant::Mhc, 1, 8, InitPolicy::ResidualEmulation, 0).unwrap();
        randomized(&mut p, &mut rng);
        let x = rng.matrix_uniform(1, 8, -2.0, 2.0);
        for ms in [
            compute_mappings_mhc(&x, &p).unwrap(),
            compute_mappings_mhc_fused(&x, &p).unwrap(),
        ] {
            assert_eq!(ms.h_pre.get(0, 0), 1.0);
            assert_eq!(ms.h_post.get(0, 0), 1.0);
            assert_eq!(ms.h_res.get(0, 0), 1.0);
        }
    }

    #[test]
    fn fused_path_matches_reference_within_tolerance() {
        for seed in 0..10u64 {
            let mut rng = SeededRng::new(seed);
            let mut p = init_params(Variant::Mhc, 4, 32, InitPolicy::Uniform, seed).unwrap();
            randomized(&mut p, &mut rng);
            let x = rng.matrix_uniform(4, 32, -2.0, 2.0);
            let a = compute_mappings_mhc(&x, &p).unwrap();
            let b = compute_mappings_mhc_fused(&x, &p).unwrap();
            for (m_a, m_b) in [
                (&a.h_pre, &b.h_pre),
                (&a.h_post, &b.h_post),
                (&a.h_res, &b.h_res),
            ] {
                for (va, vb) in m_a.data().iter().zip(m_b.data()) {
                    let denom = va.abs().max(vb.abs()).max(1.0);
                    assert!(
                        (va - vb).abs() / denom <= 1e-10,
                        "fused deviates: {va} vs {vb}"
                    );
                }
            }
        }
    }

    #[test]
    fn fused_and_reference_agree_exactly_at_zero_input() {
        let mut rng = SeededRng::new(5);
        let mut p = init_params(Variant::Mhc, 4, 8, InitPolicy::ResidualEmulation, 0).unwrap();
        randomized(&mut p, &mut rng);
        let x = Matrix::zeros(4, 8);
        let a = compute_mappings_mhc(&x, &p).unwrap();
        let b = compute_mappings_mhc_fused(&x, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mhc_constraint_ranges_hold() {
        let mut rng = SeededRng::new(12);
        for _ in 0..20 {
            let mut p = init_params(Variant::Mhc, 4, 8, InitPolicy::Uniform, 0).unwrap();
            randomized(&mut p, &mut rng);
            let x = rng.matrix_uniform(4, 8, -3.0, 3.0);
            let ms = compute_mappings_mhc(&x, &p).unwrap();
            for &v in ms.h_pre.data() {
                assert!(v > 0.0 && v < 1.0, "h_pre entry {v} out of (0,1)");
            }
            for &v in ms.h_post.data() {
                assert!(v > 0.0 && v < 2.0, "h_post entry {v} out of (0,2)");
            }
            let d = ds_diagnostics(&ms.h_res).unwrap();
            assert!(d.max_row_dev <= 1e-12);
            assert!(d.max_col_dev <= 1e-3);
            assert!(d.min_entry > 0.0);
        }
    }

    #[test]
    fn ablation_replaces_disabled_maps_with_fixed_ones() {
        let mut rng = SeededRng::new(3);
        let mut p = init_params(Variant::Mhc, 4, 8, InitPolicy::Uniform, 0).unwrap();
        randomized(&mut p, &mut rng);
        let x = rng.matrix_uniform(4, 8, -1.0, 1.0);
        let ms = compute_mappings_mhc(&x, &p).unwrap();

        let none = apply_ablation(
            &ms,
            &AblationMask {
                use_pre: false,
                use_post: false,
                use_res: false,
            },
            4,
        );
        assert_eq!(none.h_pre, Matrix::filled(1, 4, 0.25));
        assert_eq!(none.h_post, Matrix::filled(1, 4, 1.0));
        assert_eq!(none.h_res, Matrix::identity(4));

        let all = apply_ablation(&ms, &AblationMask::default(), 4);
        assert_eq!(all, ms);

        let res_only = apply_ablation(
            &ms,
            &AblationMask {
                use_pre: false,
                use_post: false,
                use_res: true,
            },
            4,
        );
        assert_eq!(res_only.h_res, ms.h_res);
        assert_eq!(res_only.h_pre, Matrix::filled(1, 4, 0.25));
    }

    #[test]
    fn residual_emulation_init_is_close_to_the_residual_pattern() {
        let p = init_params(Variant::Mhc, 4, 8, InitPolicy::ResidualEmulation, 0).unwrap();
        assert_eq!(p.bias_res, Matrix::identity(4).scale(6.0));
        assert_eq!(p.bias_pre, Matrix::row_vector(&[6.0, -6.0, -6.0, -6.0]));
        assert_eq!(p.bias_post, Matrix::row_vector(&[0.0, -6.0, -6.0, -6.0]));

        let ms = compute_mappings_mhc(&Matrix::zeros(4, 8), &p).unwrap();
        let target_pre = Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]);
        let target_res = Matrix::identity(4);
        for j in 0..4 {
            assert!((ms.h_pre.get(0, j) - target_pre.get(0, j)).abs() < 0.05);
            assert!((ms.h_post.get(0, j) - target_pre.get(0, j)).abs() < 0.05);
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((ms.h_res.get(i, j) - target_res.get(i, j)).abs() < 0.05);
            }
        }
    }

    #[test]
    fn zero_gates_make_maps_input_independent() {
        let mut rng = SeededRng::new(8);
        let mut p = init_params(Variant::Mhc, 4, 8, InitPolicy::Uniform, 0).unwrap();
        randomized(&mut p, &mut rng);
        p.alpha_pre = 0.0;
        p.alpha_post = 0.0;
        p.alpha_res = 0.0;
        let a = compute_mappings_mhc(&rng.matrix_uniform(4, 8, -2.0, 2.0), &p).unwrap();
        let b = compute_mappings_mhc(&rng.matrix_uniform(4, 8, -2.0, 2.0), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_validation_rejects_mismatches() {
        let mut p = init_params(Variant::Mhc, 4, 8, InitPolicy::Uniform, 0).unwrap();
        p.proj_pre = Matrix::zeros(3, 4);
        assert!(p.validate().is_err());

        let p = init_params(Variant::Mhc, 4, 8, InitPolicy::Uniform, 0).unwrap();
        let wrong = Matrix::zeros(3, 8);
        assert!(compute_mappings_mhc(&wrong, &p).is_err());

        assert!(init_params(Variant::Baseline, 2, 8, InitPolicy::Uniform, 0).is_err());
    }
}
