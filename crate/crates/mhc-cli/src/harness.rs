//! Model construction, toy tasks, and the training loop.
//!
//! Everything here is deterministic in the experiment seed: layer weights,
//! dataset samples, and batch order are all derived from it, so a rerun with
//! the same resolved config reproduces the metrics byte for byte.

use crate::config::{fnv1a64, ExperimentConfig, Task};
use mhc_core::{
    amax_gain, ds_diagnostics, expand, gradient_norm, init_params, record_mean_loss,
    record_mse_loss, record_stack_forward, record_stack_params, stack_forward, AblationMask,
    DsDiagnostics, LayerEntry, LayerFunction, Matrix, MhcError, ParamAccess, ParamKey, Result,
    SeededRng, SinkhornConfig, StackConfig, StreamState, Tape, Variant,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Derives an independent stream of randomness for one named purpose.
pub(crate) fn subseed(seed: u64, label: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(label.len() + 16);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

/// Builds the initial stack described by an experiment config.
pub fn build_stack(cfg: &ExperimentConfig) -> Result<StackConfig> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.l);
    for l in 0..cfg.l {
        let mut mapping = init_params(cfg.variant, cfg.n, cfg.c, cfg.init, cfg.seed)?;
        mapping.sinkhorn = SinkhornConfig {
            t_max: cfg.t_max,
            ..SinkhornConfig::default()
        };
        let layer_fn =
            LayerFunction::init(cfg.layer_fn, cfg.c, subseed(cfg.seed, "layer_fn", l as u64))?;
        layers.push(LayerEntry { mapping, layer_fn });
    }
    let stack = StackConfig {
        variant: cfg.variant,
        n: cfg.n,
        c: cfg.c,
        layers,
        ablation: AblationMask {
            use_pre: cfg.use_pre,
            use_post: cfg.use_post,
            use_res: cfg.use_res,
        },
    };
    stack.validate()?;
    Ok(stack)
}

/// A deterministic supervised dataset of (input, target) rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&Matrix, &Matrix) {
        let k = i % self.len();
        (&self.inputs[k], &self.targets[k])
    }
}

const REGRESSION_SAMPLES: usize = 32;
const CORPUS: &str = "sphinx of black quartz judge my vow. pack my box \
with five dozen liquor jugs. how vexingly quick daft zebras jump!";

/// Builds the task dataset for a config.
pub fn build_dataset(cfg: &ExperimentConfig) -> Dataset {
    match cfg.task {
        Task::SyntheticRegression => {
            let mut teacher_rng = SeededRng::new(subseed(cfg.seed, "teacher", 0));
            let teacher = teacher_rng.matrix_uniform(cfg.c, cfg.c, -0.5, 0.5);
            let mut rng = SeededRng::new(subseed(cfg.seed, "samples", 0));
            let mut inputs = Vec::with_capacity(REGRESSION_SAMPLES);
            let mut targets = Vec::with_capacity(REGRESSION_SAMPLES);
            for _ in 0..REGRESSION_SAMPLES {
                let x = rng.matrix_uniform(1, cfg.c, -1.0, 1.0);
                let y = mhc_core::matrix::matmul(&x, &teacher).expect("teacher shapes agree");
                inputs.push(x);
                targets.push(y);
            }
            Dataset { inputs, targets }
        }
        Task::CharSequence => {
            // Each distinct character gets a fixed random embedding; the
            // objective regresses the embedding of the next character.
            let mut alphabet: Vec<char> = CORPUS.chars().collect();
            alphabet.sort_unstable();
            alphabet.dedup();
            let mut embed_rng = SeededRng::new(subseed(cfg.seed, "embed", 0));
            let table: BTreeMap<char, Matrix> = alphabet
                .into_iter()
                .map(|ch| (ch, embed_rng.matrix_uniform(1, cfg.c, -1.0, 1.0)))
                .collect();
            let chars: Vec<char> = CORPUS.chars().collect();
            let mut inputs = Vec::with_capacity(chars.len() - 1);
            let mut targets = Vec::with_capacity(chars.len() - 1);
            for w in chars.windows(2) {
                inputs.push(table[&w[0]].clone());
                targets.push(table[&w[1]].clone());
            }
            Dataset { inputs, targets }
        }
    }
}

/// One logged row of training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub ds: DsDiagnostics,
    /// Per-layer (forward, backward) amax gains of the live mixing matrices.
    pub gains: Vec<(f64, f64)>,
    pub diverged: bool,
}

/// The full logged history of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
    pub diverged: bool,
}

impl MetricsTrace {
    pub fn to_csv(&self, layers: usize) -> String {
        let mut out = String::from("step,loss,grad_norm,ds_max_row_dev,ds_max_col_dev,ds_min_entry");
        for l in 0..layers {
            out.push_str(&format!(",l{l}_fwd,l{l}_bwd"));
        }
        out.push_str(",status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.step, r.loss, r.grad_norm, r.ds.max_row_dev, r.ds.max_col_dev, r.ds.min_entry
            ));
            for (f, b) in &r.gains {
                out.push_str(&format!(",{f},{b}"));
            }
            out.push_str(if r.diverged { ",diverged\n" } else { ",ok\n" });
        }
        out
    }
}

/// Terminal state of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainOutcome {
    Completed,
    Diverged,
    /// A logged step broke the constraint ranges or stochasticity bounds.
    InvariantViolation,
}

#[derive(Debug)]
pub struct TrainResult {
    pub stack: StackConfig,
    pub trace: MetricsTrace,
    pub outcome: TrainOutcome,
    pub violation: Option<String>,
}

/// A trained model paired with the config that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub stack: StackConfig,
}

/// Row/column tolerances a constrained run must keep at logged steps.
const DS_ROW_TOL: f64 = 1e-12;
const DS_COL_TOL: f64 = 1e-3;

fn probe_diagnostics(
    stack: &StackConfig,
    probe: &StreamState,
) -> Result<(DsDiagnostics, Vec<(f64, f64)>)> {
    let (_, trace) = stack_forward(probe, stack)?;
    let mut worst = DsDiagnostics {
        max_row_dev: 0.0,
        max_col_dev: 0.0,
        min_entry: f64::INFINITY,
    };
    let mut gains = Vec::with_capacity(trace.len());
    for ms in &trace {
        let d = ds_diagnostics(&ms.h_res)?;
        worst.max_row_dev = worst.max_row_dev.max(d.max_row_dev);
        worst.max_col_dev = worst.max_col_dev.max(d.max_col_dev);
        worst.min_entry = worst.min_entry.min(d.min_entry);
        gains.push(amax_gain(&ms.h_res)?);
    }
    Ok((worst, gains))
}

fn constraint_violation(cfg: &ExperimentConfig, ds: &DsDiagnostics) -> Option<String> {
    if cfg.variant != Variant::Mhc || !cfg.use_res {
        return None;
    }
    if ds.max_row_dev > DS_ROW_TOL {
        return Some(format!(
            "mixing row sums deviate by {} (tolerance {DS_ROW_TOL})",
            ds.max_row_dev
        ));
    }
    if ds.max_col_dev > DS_COL_TOL {
        return Some(format!(
            "mixing column sums deviate by {} (tolerance {DS_COL_TOL})",
            ds.max_col_dev
        ));
    }
    if ds.min_entry <= 0.0 {
        return Some(format!("mixing entry {} is not positive", ds.min_entry));
    }
    None
}

/// Runs the training loop. The returned trace ends with a diverged row if a
/// loss or state stops being finite; constraint violations stop the run
/// immediately with the offending step recorded.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainResult> {
    let mut stack = build_stack(cfg)?;
    let data = build_dataset(cfg);
    let probe = expand(&data.inputs[0], cfg.n)?;
    let mut velocity: BTreeMap<ParamKey, Matrix> = BTreeMap::new();
    let mut trace = MetricsTrace {
        rows: Vec::new(),
        diverged: false,
    };

    // Zero configured steps still makes one pass to record the initial loss;
    // the update at the end of that pass is skipped.
    for step in 0..cfg.steps.max(1) {
        let logged = step % cfg.log_every == 0 || step + 1 == cfg.steps;

        let mut tape = Tape::new();
        let leaves = record_stack_params(&mut tape, &stack)?;
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let mut failed = false;
        for b in 0..cfg.batch_size {
            let (x, y) = data.sample(step * cfg.batch_size + b);
            let x0 = tape.constant(expand(x, cfg.n)?.values);
            let taped = match record_stack_forward(&mut tape, &stack, &leaves, x0) {
                Ok(t) => t,
                Err(MhcError::NonFiniteLayer { .. }) | Err(MhcError::NonFiniteOutput) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let pred = tape.mean_rows(taped.output());
            losses.push(record_mse_loss(&mut tape, pred, y)?);
        }
        if failed {
            trace.rows.push(divergence_row(step, f64::NAN));
            trace.diverged = true;
            return Ok(TrainResult {
                stack,
                trace,
                outcome: TrainOutcome::Diverged,
                violation: None,
            });
        }
        let loss_node = record_mean_loss(&mut tape, &losses)?;
        let loss = tape.value(loss_node).get(0, 0);
        if !loss.is_finite() {
            trace.rows.push(divergence_row(step, loss));
            trace.diverged = true;
            return Ok(TrainResult {
                stack,
                trace,
                outcome: TrainOutcome::Diverged,
                violation: None,
            });
        }
        let bundle = tape.backward(loss_node)?;

        if logged {
            let (ds, gains) = probe_diagnostics(&stack, &probe)?;
            trace.rows.push(MetricsRow {
                step,
                loss,
                grad_norm: gradient_norm(&bundle),
                ds,
                gains,
                diverged: false,
            });
            if let Some(msg) = constraint_violation(cfg, &ds) {
                return Ok(TrainResult {
                    stack,
                    trace,
                    outcome: TrainOutcome::InvariantViolation,
                    violation: Some(format!("step {step}: {msg}")),
                });
            }
        }

        if cfg.steps == 0 {
            break;
        }
        for (key, grad) in &bundle.params {
            let applied = if cfg.momentum > 0.0 {
                let v = velocity
                    .entry(*key)
                    .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                *v = v.scale(cfg.momentum).add(grad)?;
                v.clone()
            } else {
                grad.clone()
            };
            for (idx, g) in applied.data().iter().enumerate() {
                let old = stack.param_get(key, idx)?;
                stack.param_set(key, idx, old - cfg.step_size * g)?;
            }
        }
    }

    Ok(TrainResult {
        stack,
        trace,
        outcome: TrainOutcome::Completed,
        violation: None,
    })
}

fn divergence_row(step: usize, loss: f64) -> MetricsRow {
    MetricsRow {
        step,
        loss,
        grad_norm: f64::NAN,
        ds: DsDiagnostics {
            max_row_dev: f64::NAN,
            max_col_dev: f64::NAN,
            min_entry: f64::NAN,
        },
        gains: Vec::new(),
        diverged: true,
    }
}
