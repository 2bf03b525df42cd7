//! Propagation-stability diagnostics: gain magnitudes of single-layer and
//! composite residual-mixing maps, plus heatmap exports.
//!
//! The forward gain of a mixing matrix is the maximum absolute row sum and
//! the backward gain the maximum absolute column sum: applied to the
//! all-ones signal, the row sums say how much a forward pass can amplify a
//! stream, and the column sums play the same role for gradients flowing
//! back. Doubly stochastic maps have both gains equal to 1, and products of
//! doubly stochastic maps stay doubly stochastic, so a constrained stack
//! cannot amplify across depth. Unconstrained maps enjoy no such bound and
//! their composite gains compound geometrically; the synthetic generators
//! at the bottom of this module reproduce both regimes.
//!
//! Composite gains are reported by starting layer: entry `l` describes the
//! product of all mixing maps from layer `l` through the final layer.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};
use crate::mapping::{ones_post, uniform_pre, MappingSet};
use crate::matrix::{self, Matrix};
use crate::rng::SeededRng;
use crate::sinkhorn::{sinkhorn_project, SinkhornConfig};

/// Forward and backward gain magnitudes of a square mixing matrix:
/// `(max_i |sum_j m_ij|, max_j |sum_i m_ij|)`. The absolute value wraps the
/// whole sum, so signed entries may cancel.
pub fn amax_gain(m: &Matrix) -> Result<(f64, f64)> {
    if m.rows() != m.cols() {
        return Err(MhcError::NotSquare {
            op: "amax_gain",
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let forward = matrix::row_sums(m)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    let backward = matrix::col_sums(m)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    Ok((forward, backward))
}

/// Token-averaged gain magnitudes for a stack of mixing maps.
///
/// `per_layer_*[l]` is the gain of layer `l`'s own map; `composite_*[l]` is
/// the gain of the product from layer `l` through the final layer. All
/// values are means over the traced tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub per_layer_forward: Vec<f64>,
    pub per_layer_backward: Vec<f64>,
    pub composite_forward: Vec<f64>,
    pub composite_backward: Vec<f64>,
    pub tokens: usize,
}

impl GainReport {
    pub fn depth(&self) -> usize {
        self.per_layer_forward.len()
    }

    /// One row per layer: `layer,forward_gain,backward_gain`.
    pub fn per_layer_csv(&self) -> String {
        let mut out = String::from("layer,forward_gain,backward_gain\n");
        for l in 0..self.depth() {
            out.push_str(&format!(
                "{l},{},{}\n",
                self.per_layer_forward[l], self.per_layer_backward[l]
            ));
        }
        out
    }

    /// One row per starting layer: `start_layer,forward_gain,backward_gain`
    /// for the product ending at the final layer.
    pub fn composite_csv(&self) -> String {
        let mut out = String::from("start_layer,forward_gain,backward_gain\n");
        for l in 0..self.depth() {
            out.push_str(&format!(
                "{l},{},{}\n",
                self.composite_forward[l], self.composite_backward[l]
            ));
        }
        out
    }
}

/// Computes a [`GainReport`] from per-token mapping traces. `traces[t]` is
/// the mapping trace recorded while propagating token `t`; all tokens must
/// have traces of the same depth.
pub fn gain_profile(traces: &[Vec<MappingSet>]) -> Result<GainReport> {
    let Some(first) = traces.first() else {
        return Err(MhcError::invalid("gain profile needs at least one token"));
    };
    let depth = first.len();
    if depth == 0 {
        return Err(MhcError::invalid("gain profile needs at least one layer"));
    }
    for (t, trace) in traces.iter().enumerate() {
        if trace.len() != depth {
            return Err(MhcError::invalid(format!(
                "token {t} has {} layers where the first token has {depth}",
                trace.len()
            )));
        }
    }

    let tokens = traces.len();
    let mut per_layer_forward = vec![0.0; depth];
    let mut per_layer_backward = vec![0.0; depth];
    let mut composite_forward = vec![0.0; depth];
    let mut composite_backward = vec![0.0; depth];

    for trace in traces {
        for (l, ms) in trace.iter().enumerate() {
            let (f, b) = amax_gain(&ms.h_res)?;
            per_layer_forward[l] += f;
            per_layer_backward[l] += b;
        }
        // Suffix products anchored at the final layer, built by extending
        // the product one earlier layer at a time.
        let n = trace[0].h_res.rows();
        let mut product = Matrix::identity(n);
        for l in (0..depth).rev() {
            product = matrix::matmul(&product, &trace[l].h_res)?;
            let (f, b) = amax_gain(&product)?;
            composite_forward[l] += f;
            composite_backward[l] += b;
        }
    }

    let scale = 1.0 / tokens as f64;
    for v in per_layer_forward
        .iter_mut()
        .chain(per_layer_backward.iter_mut())
        .chain(composite_forward.iter_mut())
        .chain(composite_backward.iter_mut())
    {
        *v *= scale;
    }
    Ok(GainReport {
        per_layer_forward,
        per_layer_backward,
        composite_forward,
        composite_backward,
        tokens,
    })
}

/// A mixing matrix prepared for plotting: the value grid plus its row and
/// column sums as axis labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub values: Matrix,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub annotation: String,
}

impl HeatmapExport {
    /// Confirms the labels still match the grid they were computed from.
    pub fn validate(&self) -> Result<()> {
        let rs = matrix::row_sums(&self.values);
        let cs = matrix::col_sums(&self.values);
        let ok = rs.len() == self.row_sums.len()
            && cs.len() == self.col_sums.len()
            && rs
                .iter()
                .zip(&self.row_sums)
                .all(|(a, b)| (a - b).abs() <= 1e-9)
            && cs
                .iter()
                .zip(&self.col_sums)
                .all(|(a, b)| (a - b).abs() <= 1e-9);
        if ok {
            Ok(())
        } else {
            Err(MhcError::invalid(
                "heatmap labels disagree with the value grid",
            ))
        }
    }
}

/// Packages a matrix with freshly computed row/column-sum labels.
pub fn export_heatmap(m: &Matrix, annotation: &str) -> HeatmapExport {
    HeatmapExport {
        values: m.clone(),
        row_sums: matrix::row_sums(m),
        col_sums: matrix::col_sums(m),
        annotation: annotation.to_string(),
    }
}

fn noise_matrices(layers: usize, n: usize, sigma: f64, seed: u64) -> Vec<Matrix> {
    let mut rng = SeededRng::new(seed);
    (0..layers)
        .map(|_| {
            let noise = rng.matrix_normal(n, n, 0.0, sigma);
            Matrix::identity(n).add(&noise).expect("same shape")
        })
        .collect()
}

fn trace_from_mixes(mixes: Vec<Matrix>, n: usize) -> Vec<MappingSet> {
    mixes
        .into_iter()
        .map(|h_res| MappingSet {
            h_pre: uniform_pre(n),
            h_post: ones_post(n),
            h_res,
        })
        .collect()
}

/// Synthetic unconstrained trace: each layer mixes with `I + N(0, sigma^2)`
/// entrywise noise. Composite gains of such stacks grow geometrically with
/// depth.
pub fn noisy_identity_trace(layers: usize, n: usize, sigma: f64, seed: u64) -> Vec<MappingSet> {
    trace_from_mixes(noise_matrices(layers, n, sigma, seed), n)
}

/// The same noisy matrices as [`noisy_identity_trace`] for the same seed,
/// but projected onto the doubly stochastic manifold, which caps every
/// composite gain near 1.
pub fn projected_noisy_trace(
    layers: usize,
    n: usize,
    sigma: f64,
    seed: u64,
    cfg: &SinkhornConfig,
) -> Result<Vec<MappingSet>> {
    let mixes = noise_matrices(layers, n, sigma, seed)
        .iter()
        .map(|m| sinkhorn_project(m, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(trace_from_mixes(mixes, n))
}

/// A convex combination of `k` random permutation matrices: exactly doubly
/// stochastic up to the rounding of the convex weights.
pub fn permutation_mix(n: usize, k: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if n == 0 || k == 0 {
        return Err(MhcError::invalid("permutation mix needs n >= 1 and k >= 1"));
    }
    let mut weights: Vec<f64> = (0..k).map(|_| rng.uniform(0.1, 1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let mut out = Matrix::zeros(n, n);
    for &w in &weights {
        // Fisher-Yates over the column targets.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        for (i, &j) in perm.iter().enumerate() {
            out.set(i, j, out.get(i, j) + w);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::ds_diagnostics;

    fn unit_trace(layers: usize, n: usize) -> Vec<MappingSet> {
        (0..layers)
            .map(|_| MappingSet {
                h_pre: uniform_pre(n),
                h_post: ones_post(n),
                h_res: Matrix::identity(n),
            })
            .collect()
    }

    #[test]
    fn gain_examples() {
        let (f, b) = amax_gain(&Matrix::identity(5)).unwrap();
        assert_eq!((f, b), (1.0, 1.0));

        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(amax_gain(&m).unwrap(), (2.0, 2.0));

        // Doubly stochastic to machine precision.
        let ds = Matrix::from_rows(&[vec![0.25, 0.75], vec![0.75, 0.25]]).unwrap();
        assert_eq!(amax_gain(&ds).unwrap(), (1.0, 1.0));

        assert!(amax_gain(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn gains_take_the_absolute_value_of_the_sum_not_the_sum_of_absolutes() {
        // Row sums are 0 and 1; summing |entries| instead would give 2.
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0]]).unwrap();
        let (f, b) = amax_gain(&m).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(b, 1.0);
    }

    #[test]
    fn identity_traces_profile_to_all_ones() {
        let traces = vec![unit_trace(4, 3), unit_trace(4, 3)];
        let report = gain_profile(&traces).unwrap();
        assert_eq!(report.tokens, 2);
        assert_eq!(report.depth(), 4);
        for l in 0..4 {
            assert_eq!(report.per_layer_forward[l], 1.0);
            assert_eq!(report.per_layer_backward[l], 1.0);
            assert_eq!(report.composite_forward[l], 1.0);
            assert_eq!(report.composite_backward[l], 1.0);
        }
    }

    #[test]
    fn single_token_single_layer_reduces_to_amax_gain() {
        let mut rng = SeededRng::new(17);
        let h_res = rng.matrix_uniform(3, 3, -1.0, 1.0);
        let trace = vec![vec![MappingSet {
            h_pre: uniform_pre(3),
            h_post: ones_post(3),
            h_res: h_res.clone(),
        }]];
        let report = gain_profile(&trace).unwrap();
        let (f, b) = amax_gain(&h_res).unwrap();
        assert_eq!(report.per_layer_forward[0], f);
        assert_eq!(report.per_layer_backward[0], b);
        assert_eq!(report.composite_forward[0], f);
        assert_eq!(report.composite_backward[0], b);
    }

    #[test]
    fn one_token_profile_equals_the_unaveraged_computation() {
        let mut rng = SeededRng::new(18);
        let trace: Vec<MappingSet> = (0..5)
            .map(|_| MappingSet {
                h_pre: uniform_pre(3),
                h_post: ones_post(3),
                h_res: rng.matrix_uniform(3, 3, -0.5, 0.9),
            })
            .collect();
        let report = gain_profile(std::slice::from_ref(&trace)).unwrap();
        for l in 0..5 {
            let (f, b) = amax_gain(&trace[l].h_res).unwrap();
            assert_eq!(report.per_layer_forward[l], f);
            assert_eq!(report.per_layer_backward[l], b);

            let mut product = Matrix::identity(3);
            for ms in trace[l..].iter() {
                product = matrix::matmul(&ms.h_res, &product).unwrap();
            }
            let (cf, cb) = amax_gain(&product).unwrap();
            // The profile builds the same product by right-multiplication;
            // both orders realize H_{L-1} ... H_l.
            assert!((report.composite_forward[l] - cf).abs() <= 1e-12);
            assert!((report.composite_backward[l] - cb).abs() <= 1e-12);
        }
    }

    #[test]
    fn token_averaging_is_a_plain_mean() {
        let scaled = |s: f64| {
            vec![MappingSet {
                h_pre: uniform_pre(2),
                h_post: ones_post(2),
                h_res: Matrix::identity(2).scale(s),
            }]
        };
        let report = gain_profile(&[scaled(1.0), scaled(3.0)]).unwrap();
        assert_eq!(report.per_layer_forward[0], 2.0);
        assert_eq!(report.composite_backward[0], 2.0);
    }

    #[test]
    fn misaligned_traces_are_rejected() {
        let traces = vec![unit_trace(3, 2), unit_trace(2, 2)];
        assert!(gain_profile(&traces).is_err());
        assert!(gain_profile(&[]).is_err());
        assert!(gain_profile(&[vec![]]).is_err());
    }

    #[test]
    fn unconstrained_noise_blows_up_and_projection_contains_it() {
        // Eight streams give the noise product a comfortable margin over the
        // 1e2 bound; at four streams the peak depends heavily on the seed.
        let layers = 60;
        let n = 8;
        let sigma = 0.2;
        let raw = noisy_identity_trace(layers, n, sigma, 99);
        let report = gain_profile(std::slice::from_ref(&raw)).unwrap();
        let peak = report
            .composite_forward
            .iter()
            .fold(0.0_f64, |a, &b| a.max(b));
        assert!(peak > 1e2, "unconstrained composite peak {peak} too small");

        let projected =
            projected_noisy_trace(layers, n, sigma, 99, &SinkhornConfig::default()).unwrap();
        let report = gain_profile(std::slice::from_ref(&projected)).unwrap();
        for l in 0..layers {
            assert!(
                report.composite_forward[l] <= 1.0 + 1e-6,
                "projected composite forward {} at layer {l}",
                report.composite_forward[l]
            );
        }
    }

    #[test]
    fn projected_composites_keep_backward_gain_small() {
        let projected =
            projected_noisy_trace(60, 4, 0.2, 7, &SinkhornConfig::default()).unwrap();
        let report = gain_profile(std::slice::from_ref(&projected)).unwrap();
        for l in 0..60 {
            assert!(report.composite_backward[l] <= 2.0);
        }
    }

    #[test]
    fn gain_is_submultiplicative_for_nonnegative_matrices() {
        let mut rng = SeededRng::new(23);
        for _ in 0..30 {
            let a = rng.matrix_uniform(4, 4, 0.0, 1.5);
            let b = rng.matrix_uniform(4, 4, 0.0, 1.5);
            let prod = matrix::matmul(&a, &b).unwrap();
            let (fa, ba) = amax_gain(&a).unwrap();
            let (fb, bb) = amax_gain(&b).unwrap();
            let (fp, bp) = amax_gain(&prod).unwrap();
            assert!(fp <= fa * fb + 1e-9, "{fp} > {fa} * {fb}");
            assert!(bp <= ba * bb + 1e-9, "{bp} > {ba} * {bb}");
        }
    }

    #[test]
    fn permutation_mixes_are_exactly_doubly_stochastic() {
        let mut rng = SeededRng::new(31);
        for _ in 0..20 {
            let m = permutation_mix(4, 3, &mut rng).unwrap();
            let d = ds_diagnostics(&m).unwrap();
            assert!(d.max_row_dev <= 1e-12);
            assert!(d.max_col_dev <= 1e-12);
            assert!(d.min_entry >= 0.0);
        }
        assert!(permutation_mix(0, 3, &mut rng).is_err());
    }

    #[test]
    fn exactly_doubly_stochastic_stacks_have_unit_composite_gains() {
        let mut rng = SeededRng::new(37);
        let trace: Vec<MappingSet> = (0..60)
            .map(|_| MappingSet {
                h_pre: uniform_pre(4),
                h_post: ones_post(4),
                h_res: permutation_mix(4, 3, &mut rng).unwrap(),
            })
            .collect();
        let report = gain_profile(std::slice::from_ref(&trace)).unwrap();
        for l in 0..60 {
            assert!((report.composite_forward[l] - 1.0).abs() <= 1e-9);
            assert!((report.composite_backward[l] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn heatmap_labels_match_the_grid() {
        let id = export_heatmap(&Matrix::identity(3), "layer 0");
        assert_eq!(id.row_sums, vec![1.0, 1.0, 1.0]);
        assert_eq!(id.col_sums, vec![1.0, 1.0, 1.0]);
        id.validate().unwrap();

        let uniform = export_heatmap(&Matrix::filled(4, 4, 0.25), "uniform");
        assert!(uniform.row_sums.iter().all(|&s| s == 1.0));
        assert!(uniform.col_sums.iter().all(|&s| s == 1.0));
        assert!(uniform.values.data().iter().all(|&v| v == 0.25));
        uniform.validate().unwrap();

        let mut broken = export_heatmap(&Matrix::identity(2), "x");
        broken.row_sums[0] = 7.0;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn heatmap_round_trips_through_json() {
        let mut rng = SeededRng::new(41);
        let export = export_heatmap(&rng.matrix_uniform(3, 3, 0.0, 1.0), "layers 2..5");
        let text = serde_json::to_string(&export).unwrap();
        let back: HeatmapExport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, export);
        back.validate().unwrap();
    }

    #[test]
    fn csv_tables_have_one_row_per_layer() {
        let report = gain_profile(&[unit_trace(3, 2)]).unwrap();
        let per_layer = report.per_layer_csv();
        let lines: Vec<&str> = per_layer.trim_end().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "layer,forward_gain,backward_gain");
        assert_eq!(lines[1], "0,1,1");
        let composite = report.composite_csv();
        assert!(composite.starts_with("start_layer,"));
        assert_eq!(composite.trim_end().lines().count(), 4);
    }
}
