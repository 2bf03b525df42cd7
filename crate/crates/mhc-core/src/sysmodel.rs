//! Analytic cost models: per-token I/O element counts, the activation
//! ledger for the backward pass, and recompute block-size planning.
//!
//! All costs count f64 elements, not bytes; byte conversion is a display
//! concern. The I/O table covers only the stream machinery around the layer
//! function: reads and writes internal to F itself are excluded.

use serde::{Deserialize, Serialize};

use crate::error::{MhcError, Result};

/// Which update rule the I/O table describes: the plain residual update,
/// the n-stream update, or the n-stream update with the post/mix/merge
/// steps fused into one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    Residual,
    Hc,
    HcFused,
}

impl std::fmt::Display for CostVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CostVariant::Residual => "residual",
            CostVariant::Hc => "hc",
            CostVariant::HcFused => "hc_fused",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CostVariant {
    type Err = MhcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(CostVariant::Residual),
            "hc" => Ok(CostVariant::Hc),
            "hc_fused" => Ok(CostVariant::HcFused),
            other => Err(MhcError::invalid(format!(
                "unknown cost variant {other:?}; expected residual, hc, or hc_fused"
            ))),
        }
    }
}

/// One operation's memory traffic, in elements per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoRow {
    pub name: String,
    pub read: u64,
    pub write: u64,
}

/// Per-token memory traffic of one layer update, broken down by operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoCostBreakdown {
    pub variant: CostVariant,
    pub n: u64,
    pub c: u64,
    pub rows: Vec<IoRow>,
    pub total_read: u64,
    pub total_write: u64,
}

impl IoCostBreakdown {
    /// CSV table, one operation per row plus a trailing total row. With
    /// `bytes_per_element` the counts are converted and the columns renamed.
    pub fn to_csv(&self, bytes_per_element: Option<u64>) -> String {
        let (unit, scale) = match bytes_per_element {
            Some(b) => ("bytes", b),
            None => ("elements", 1),
        };
        let mut out = format!("operation,read_{unit},write_{unit}\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.name,
                row.read * scale,
                row.write * scale
            ));
        }
        out.push_str(&format!(
            "total,{},{}\n",
            self.total_read * scale,
            self.total_write * scale
        ));
        out
    }
}

/// Per-token I/O of one layer update. The n-stream table charges, per
/// operation: computing the mapping coefficients (reads the flattened
/// state, writes all n^2 + 2n coefficients), applying the pre-map, applying
/// the post-map, applying the residual mix, and merging the two write
/// paths. The fused variant replaces the last three with a single kernel
/// that reads the state plus the layer output once.
pub fn io_cost(variant: CostVariant, n: u64, c: u64) -> Result<IoCostBreakdown> {
    if n < 1 || c < 1 {
        return Err(MhcError::invalid("io_cost needs n >= 1 and C >= 1"));
    }
    let rows = match variant {
        CostVariant::Residual => {
            if n != 1 {
                return Err(MhcError::invalid(
                    "the residual table is single-stream; use n = 1",
                ));
            }
            vec![IoRow {
                name: "residual_update".to_string(),
                read: 2 * c,
                write: c,
            }]
        }
        CostVariant::Hc => vec![
            IoRow {
                name: "coefficients".to_string(),
                read: n * c,
                write: n * n + 2 * n,
            },
            IoRow {
                name: "pre_map".to_string(),
                read: n * c + n,
                write: c,
            },
            IoRow {
                name: "post_map".to_string(),
                read: c + n,
                write: n * c,
            },
            IoRow {
                name: "res_mix".to_string(),
                read: n * c + n * n,
                write: n * c,
            },
            IoRow {
                name: "merge".to_string(),
                read: 2 * n * c,
                write: n * c,
            },
        ],
        CostVariant::HcFused => vec![
            IoRow {
                name: "coefficients".to_string(),
                read: n * c,
                write: n * n + 2 * n,
            },
            IoRow {
                name: "pre_map".to_string(),
                read: n * c + n,
                write: c,
            },
            IoRow {
                name: "post_res_merge_fused".to_string(),
                read: (n + 1) * c,
                write: n * c,
            },
        ],
    };
    let total_read = rows.iter().map(|r| r.read).sum();
    let total_write = rows.iter().map(|r| r.write).sum();
    Ok(IoCostBreakdown {
        variant,
        n,
        c,
        rows,
        total_read,
        total_write,
    })
}

/// When an activation is kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoragePolicy {
    /// Kept once per recompute block of `L_r` layers.
    EveryBlock,
    /// Kept at every layer.
    EveryLayer,
    /// Recomputed on demand; alive only while one block is differentiated.
    Transient,
}

/// One activation kind and how it is stored, sized in elements per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub name: String,
    pub elements: u64,
    pub policy: StoragePolicy,
}

/// Per-token activation accounting for a stack of `L` layers differentiated
/// in recompute blocks of `L_r` layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLedger {
    pub n: u64,
    pub c: u64,
    pub l: u64,
    pub l_r: u64,
    pub entries: Vec<ActivationEntry>,
}

fn blocks(l: u64, l_r: u64) -> u64 {
    l.div_ceil(l_r)
}

impl ActivationLedger {
    /// Elements resident for the whole backward pass: block inputs at every
    /// block boundary plus the every-layer entries.
    pub fn resident_total(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| match e.policy {
                StoragePolicy::EveryBlock => e.elements * blocks(self.l, self.l_r),
                StoragePolicy::EveryLayer => e.elements * self.l,
                StoragePolicy::Transient => 0,
            })
            .sum()
    }

    /// Peak elements alive while one block is being recomputed: every
    /// transient entry at each of the block's `L_r` layers.
    pub fn transient_total(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| match e.policy {
                StoragePolicy::Transient => e.elements * self.l_r,
                _ => 0,
            })
            .sum()
    }
}

/// Builds the activation ledger: the block-entry state is stored every
/// `L_r` layers, the layer-function output at every layer, and the stream
/// state plus the pre-mapped input (raw and normalized) only transiently
/// during recomputation.
pub fn activation_ledger(n: u64, c: u64, l: u64, l_r: u64) -> Result<ActivationLedger> {
    if n < 1 || c < 1 || l < 1 {
        return Err(MhcError::invalid("activation ledger needs n, C, L >= 1"));
    }
    if l_r < 1 || l_r > l {
        return Err(MhcError::invalid(format!(
            "block size must satisfy 1 <= L_r <= L, got L_r = {l_r} with L = {l}"
        )));
    }
    let entries = vec![
        ActivationEntry {
            name: "block_input_state".to_string(),
            elements: n * c,
            policy: StoragePolicy::EveryBlock,
        },
        ActivationEntry {
            name: "layer_fn_output".to_string(),
            elements: c,
            policy: StoragePolicy::EveryLayer,
        },
        ActivationEntry {
            name: "stream_state".to_string(),
            elements: n * c,
            policy: StoragePolicy::Transient,
        },
        ActivationEntry {
            name: "pre_mixed_input".to_string(),
            elements: c,
            policy: StoragePolicy::Transient,
        },
        ActivationEntry {
            name: "pre_mixed_normed".to_string(),
            elements: c,
            policy: StoragePolicy::Transient,
        },
    ];
    Ok(ActivationLedger {
        n,
        c,
        l,
        l_r,
        entries,
    })
}

/// The block-size objective: elements for the stored block inputs plus the
/// transient recomputation peak, `nC * ceil(L / L_r) + (n+2)C * L_r`. The
/// every-layer entries do not depend on `L_r` and are excluded.
pub fn recompute_objective(n: u64, c: u64, l: u64, l_r: u64) -> u64 {
    n * c * blocks(l, l_r) + (n + 2) * c * l_r
}

/// A chosen recompute block size and the memory it implies. `total_elements`
/// is exactly the objective [`recompute_objective`] evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub l_r: u64,
    pub continuous_optimum: f64,
    pub resident_elements: u64,
    pub transient_elements: u64,
    pub total_elements: u64,
}

fn continuous_optimum(n: u64, l: u64) -> f64 {
    ((n * l) as f64 / (n + 2) as f64).sqrt()
}

fn plan_from_candidates(
    n: u64,
    c: u64,
    l: u64,
    candidates: impl Iterator<Item = u64>,
) -> Result<RecomputePlan> {
    let mut best: Option<(u64, u64)> = None;
    for l_r in candidates {
        let f = recompute_objective(n, c, l, l_r);
        // Strict comparison with ascending candidates keeps ties at the
        // smaller block size.
        if best.map_or(true, |(_, bf)| f < bf) {
            best = Some((l_r, f));
        }
    }
    let Some((l_r, total)) = best else {
        return Err(MhcError::invalid("no candidate block size"));
    };
    Ok(RecomputePlan {
        l_r,
        continuous_optimum: continuous_optimum(n, l),
        resident_elements: n * c * blocks(l, l_r),
        transient_elements: (n + 2) * c * l_r,
        total_elements: total,
    })
}

/// Exact integer minimizer of the block-size objective over `1..=L`, ties
/// broken toward the smaller block size.
pub fn plan_recompute(n: u64, c: u64, l: u64) -> Result<RecomputePlan> {
    if n < 1 || c < 1 || l < 1 {
        return Err(MhcError::invalid("plan_recompute needs n, C, L >= 1"));
    }
    plan_from_candidates(n, c, l, 1..=l)
}

/// Like [`plan_recompute`] but restricted to block sizes that divide the
/// per-stage layer count, so recomputation boundaries line up with pipeline
/// stages.
pub fn plan_recompute_staged(n: u64, c: u64, l: u64, stage_layers: u64) -> Result<RecomputePlan> {
    if n < 1 || c < 1 || l < 1 {
        return Err(MhcError::invalid("plan_recompute needs n, C, L >= 1"));
    }
    if stage_layers < 1 {
        return Err(MhcError::invalid("stage layer count must be positive"));
    }
    let candidates = (1..=stage_layers.min(l)).filter(|d| stage_layers % d == 0);
    plan_from_candidates(n, c, l, candidates)
}
