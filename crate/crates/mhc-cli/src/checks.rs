//! Standalone verification commands: projection quality sweeps and
//! end-to-end gradient checks against finite differences.

use crate::config::ExperimentConfig;
use crate::harness::{build_dataset, build_stack, subseed};
use mhc_core::{
    ds_diagnostics, expand, finite_difference_gradient, mse_scalar, record_mean_loss,
    record_mse_loss, record_stack_forward, record_stack_params, reduce, sinkhorn_project,
    sinkhorn_vjp, stack_forward, MhcError, Result, SeededRng, SinkhornConfig,
    StackWithInput, Tape, DEFAULT_FD_STEP,
};
use serde::{Deserialize, Serialize};

/// Summary of a projection quality sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkhornCheckSummary {
    pub n: usize,
    pub t_max: usize,
    pub trials: usize,
    pub seed: u64,
    pub max_row_dev: f64,
    pub max_col_dev: f64,
    pub min_entry: f64,
    /// Worst column deviation when only a single iteration is run.
    pub max_col_dev_single_iteration: f64,
    /// Iterating to `t_max` never worsened the single-iteration deviation.
    pub col_dev_non_increasing: bool,
    pub grad_trials: usize,
    pub grad_max_rel_err: f64,
    pub grad_pass: bool,
}

const GRAD_CHECK_RTOL: f64 = 1e-5;
const GRAD_CHECK_ATOL: f64 = 1e-8;

/// Scale-aware error: `rel_err(a, b) <= rtol` is exactly the mixed test
/// `|a - b| <= rtol * max(|a|, |b|) + atol` at the stated rtol, so vanishing
/// gradients are compared absolutely instead of against their own noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + GRAD_CHECK_ATOL / GRAD_CHECK_RTOL)
}

/// Projects `trials` random logit matrices and reports worst-case
/// diagnostics plus a finite-difference check of the projection gradient.
pub fn sinkhorn_check(n: usize, t_max: usize, trials: usize, seed: u64) -> Result<SinkhornCheckSummary> {
    if n == 0 || t_max == 0 || trials == 0 {
        return Err(MhcError::invalid(
            "sinkhorn-check needs positive n, t_max, and trials",
        ));
    }
    let cfg = SinkhornConfig {
        t_max,
        ..SinkhornConfig::default()
    };
    let single = SinkhornConfig {
        t_max: 1,
        ..SinkhornConfig::default()
    };
    let mut rng = SeededRng::new(seed);
    let mut max_row_dev = 0.0_f64;
    let mut max_col_dev = 0.0_f64;
    let mut max_col_dev_single = 0.0_f64;
    let mut min_entry = f64::INFINITY;
    for _ in 0..trials {
        let m_tilde = rng.matrix_uniform(n, n, -3.0, 3.0);
        let d = ds_diagnostics(&sinkhorn_project(&m_tilde, &cfg)?)?;
        max_row_dev = max_row_dev.max(d.max_row_dev);
        max_col_dev = max_col_dev.max(d.max_col_dev);
        min_entry = min_entry.min(d.min_entry);
        let d1 = ds_diagnostics(&sinkhorn_project(&m_tilde, &single)?)?;
        max_col_dev_single = max_col_dev_single.max(d1.max_col_dev);
    }

    // Gradient of sum(w . P(m)) checked against central differences.
    let grad_trials = trials.min(5);
    let mut grad_max_rel_err = 0.0_f64;
    let mut grad_rng = SeededRng::new(subseed(seed, "grad", 0));
    for _ in 0..grad_trials {
        let m_tilde = grad_rng.matrix_uniform(n, n, -2.0, 2.0);
        let w = grad_rng.matrix_uniform(n, n, -1.0, 1.0);
        let analytic = sinkhorn_vjp(&m_tilde, &w, &cfg)?;
        for i in 0..n {
            for j in 0..n {
                let probe = |v: f64| -> Result<f64> {
                    let mut m = m_tilde.clone();
                    m.set(i, j, v);
                    sinkhorn_project(&m, &cfg)?.frobenius_dot(&w)
                };
                let x = m_tilde.get(i, j);
                let fd =
                    (probe(x + DEFAULT_FD_STEP)? - probe(x - DEFAULT_FD_STEP)?) / (2.0 * DEFAULT_FD_STEP);
                grad_max_rel_err = grad_max_rel_err.max(rel_err(analytic.get(i, j), fd));
            }
        }
    }

    Ok(SinkhornCheckSummary {
        n,
        t_max,
        trials,
        seed,
        max_row_dev,
        max_col_dev,
        min_entry,
        max_col_dev_single_iteration: max_col_dev_single,
        col_dev_non_increasing: max_col_dev <= max_col_dev_single,
        grad_trials,
        grad_max_rel_err,
        grad_pass: grad_max_rel_err <= GRAD_CHECK_RTOL,
    })
}

/// Summary of a full-stack gradient check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub parameters_checked: usize,
    pub max_rel_err: f64,
    pub rtol: f64,
    pub pass: bool,
}

/// Compares taped gradients of a mean-square loss through the configured
/// stack against central finite differences over every parameter and the
/// input state.
pub fn grad_check(cfg: &ExperimentConfig, rtol: f64) -> Result<GradCheckSummary> {
    if !(rtol.is_finite() && rtol > 0.0) {
        return Err(MhcError::invalid("rtol must be positive"));
    }
    let stack = build_stack(cfg)?;
    let data = build_dataset(cfg);
    let (x, y) = data.sample(0);
    let x0 = expand(x, cfg.n)?;

    let mut tape = Tape::new();
    let leaves = record_stack_params(&mut tape, &stack)?;
    let input = tape.input(x0.values.clone())?;
    let taped = record_stack_forward(&mut tape, &stack, &leaves, input)?;
    let pred = tape.mean_rows(taped.output());
    let losses = [record_mse_loss(&mut tape, pred, y)?];
    let loss_node = record_mean_loss(&mut tape, &losses)?;
    let analytic = tape.backward(loss_node)?;

    let subject = StackWithInput {
        stack: stack.clone(),
        input: x0.values.clone(),
    };
    let target = y.clone();
    let numeric = finite_difference_gradient(
        |s: &StackWithInput| {
            let state = mhc_core::StreamState::new(s.input.clone());
            let (out, _) = stack_forward(&state, &s.stack)?;
            mse_scalar(&reduce(&out), &target)
        },
        &subject,
        DEFAULT_FD_STEP,
    )?;

    let mut max_err = 0.0_f64;
    let mut checked = 0usize;
    for (key, fd) in &numeric.params {
        let a = analytic
            .params
            .get(key)
            .ok_or_else(|| MhcError::invalid(format!("missing analytic gradient for {key}")))?;
        for (ga, gf) in a.data().iter().zip(fd.data()) {
            max_err = max_err.max(rel_err(*ga, *gf));
            checked += 1;
        }
    }
    let fd_input = numeric
        .input
        .as_ref()
        .ok_or_else(|| MhcError::invalid("finite differences produced no input gradient"))?;
    let an_input = analytic
        .input
        .as_ref()
        .ok_or_else(|| MhcError::invalid("tape produced no input gradient"))?;
    for (ga, gf) in an_input.data().iter().zip(fd_input.data()) {
        max_err = max_err.max(rel_err(*ga, *gf));
        checked += 1;
    }

    Ok(GradCheckSummary {
        parameters_checked: checked,
        max_rel_err: max_err,
        rtol,
        pass: max_err <= rtol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mhc_core::{LayerFnKind, Variant};

    #[test]
    fn degenerate_single_stream_projection_is_exact() {
        let s = sinkhorn_check(1, 20, 10, 0).unwrap();
        assert_eq!(s.max_row_dev, 0.0);
        assert_eq!(s.max_col_dev, 0.0);
        assert_eq!(s.min_entry, 1.0);
        assert!(s.grad_pass);
    }

    #[test]
    fn iteration_budget_tightens_columns() {
        let s = sinkhorn_check(4, 20, 50, 3).unwrap();
        assert!(s.col_dev_non_increasing);
        assert!(s.max_col_dev < s.max_col_dev_single_iteration);
        assert!(s.grad_pass, "grad err {}", s.grad_max_rel_err);
        assert!(s.max_row_dev <= 1e-12);
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let cfg = ExperimentConfig {
            variant: Variant::Mhc,
            n: 3,
            c: 8,
            l: 2,
            layer_fn: LayerFnKind::MlpPrenorm,
            ..ExperimentConfig::default()
        };
        let s = grad_check(&cfg, 1e-5).unwrap();
        assert!(s.pass, "max rel err {}", s.max_rel_err);
        assert!(s.parameters_checked > 100);
    }
}
