//! Experiment configuration: a flat JSON document plus CLI overrides.
//!
//! A config fully determines a run; the FNV-1a hash of its canonical JSON
//! names the run directory, so identical configs land in identical places.

use mhc_core::{InitPolicy, LayerFnKind, MhcError, Result, Variant};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Toy objectives driven by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Regress onto a fixed random linear teacher.
    SyntheticRegression,
    /// Predict the embedding of the next character of a fixed corpus.
    CharSequence,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::SyntheticRegression => "synthetic-regression",
            Task::CharSequence => "char-sequence",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = MhcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-regression" => Ok(Task::SyntheticRegression),
            "char-sequence" => Ok(Task::CharSequence),
            other => Err(MhcError::invalid(format!(
                "unknown task {other:?}; expected synthetic-regression or char-sequence"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub layer_fn: LayerFnKind,
    pub t_max: usize,
    pub init: InitPolicy,
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub task: Task,
    pub seed: u64,
    pub log_every: usize,
    pub use_pre: bool,
    pub use_post: bool,
    pub use_res: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Mhc,
            n: 4,
            c: 16,
            l: 4,
            layer_fn: LayerFnKind::Linear,
            t_max: 20,
            init: InitPolicy::ResidualEmulation,
            step_size: 0.05,
            steps: 200,
            batch_size: 8,
            momentum: 0.0,
            task: Task::SyntheticRegression,
            seed: 0,
            log_every: 10,
            use_pre: true,
            use_post: true,
            use_res: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MhcError::invalid(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| MhcError::invalid(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("c", self.c),
            ("l", self.l),
            ("t_max", self.t_max),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(MhcError::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(MhcError::invalid("step_size must be positive"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(MhcError::invalid("momentum must lie in [0, 1)"));
        }
        if self.variant == Variant::Baseline && self.n != 1 {
            return Err(MhcError::invalid("baseline variant requires n = 1"));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and for the resolved config file.
    pub fn canonical_json(&self) -> String {
        // Field order is fixed by the struct definition.
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Run directory name: 16 hex digits of the FNV-1a hash of the canonical
    /// JSON.
    pub fn run_name(&self) -> String {
        format!("run-{:016x}", fnv1a64(self.canonical_json().as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
