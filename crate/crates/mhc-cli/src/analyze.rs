//! Post-hoc analysis: gain profiles, composite gains, and heatmap exports
//! for a trained checkpoint or a fresh initialization.

use crate::config::ExperimentConfig;
use crate::harness::{build_stack, subseed, Checkpoint};
use mhc_core::{
    expand, export_heatmap, gain_profile, matrix, noisy_identity_trace, projected_noisy_trace,
    stack_forward, GainReport, HeatmapExport, MappingSet, Matrix, MhcError, Result, SeededRng,
    SinkhornConfig, StackConfig,
};
use std::path::Path;

/// Everything `analyze` computes before anything is written to disk.
pub struct Analysis {
    pub report: GainReport,
    pub final_layer_heatmap: HeatmapExport,
    pub composite_heatmap: HeatmapExport,
}

/// Runs a forward pass per held-out token and profiles the recorded maps.
pub fn analyze_stack(stack: &StackConfig, tokens: usize, seed: u64) -> Result<Analysis> {
    if tokens == 0 {
        return Err(MhcError::invalid("analysis needs at least one token"));
    }
    let mut rng = SeededRng::new(subseed(seed, "held_out", 0));
    let mut traces: Vec<Vec<MappingSet>> = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let x = rng.matrix_uniform(1, stack.c, -1.0, 1.0);
        let x0 = expand(&x, stack.n)?;
        let (_, trace) = stack_forward(&x0, stack)?;
        traces.push(trace);
    }
    let report = gain_profile(&traces)?;

    let depth = stack.depth();
    let final_mix = token_mean(&traces, |t| Ok(t[depth - 1].h_res.clone()))?;
    let composite = token_mean(&traces, |t| {
        let mut product = Matrix::identity(stack.n);
        for ms in t {
            product = matrix::matmul(&ms.h_res, &product)?;
        }
        Ok(product)
    })?;
    Ok(Analysis {
        report,
        final_layer_heatmap: export_heatmap(
            &final_mix,
            &format!("token-averaged mixing matrix, layer {}", depth - 1),
        ),
        composite_heatmap: export_heatmap(
            &composite,
            &format!("token-averaged composite mixing, layers 0..{depth}"),
        ),
    })
}

fn token_mean(
    traces: &[Vec<MappingSet>],
    f: impl Fn(&[MappingSet]) -> Result<Matrix>,
) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for t in traces {
        let m = f(t)?;
        acc = Some(match acc {
            None => m,
            Some(a) => a.add(&m)?,
        });
    }
    let acc = acc.expect("token count validated positive");
    Ok(acc.scale(1.0 / traces.len() as f64))
}

/// Loads a checkpoint written by `train`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MhcError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| MhcError::invalid(format!("bad checkpoint {}: {e}", path.display())))?;
    ckpt.stack.validate()?;
    Ok(ckpt)
}

/// Builds the model to analyze: a checkpoint if given, else a fresh init.
pub fn resolve_stack(
    checkpoint: Option<&Path>,
    cfg: &ExperimentConfig,
) -> Result<(StackConfig, ExperimentConfig)> {
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            Ok((ckpt.stack, ckpt.config))
        }
        None => Ok((build_stack(cfg)?, cfg.clone())),
    }
}

/// Gain reports for the scripted demonstration traces: an unconstrained
/// noisy-identity stack and the same noise pushed through the projection.
pub fn demo_reports(layers: usize, n: usize, sigma: f64, seed: u64) -> Result<(GainReport, GainReport)> {
    let raw = noisy_identity_trace(layers, n, sigma, seed);
    let unconstrained = gain_profile(std::slice::from_ref(&raw))?;
    let projected = projected_noisy_trace(layers, n, sigma, seed, &SinkhornConfig::default())?;
    let contained = gain_profile(std::slice::from_ref(&projected))?;
    Ok((unconstrained, contained))
}
