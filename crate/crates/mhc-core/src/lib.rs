//! Core library for n-stream residual propagation with constrained mixing.
//!
//! A stack of residual layers is widened to `n` parallel streams. Each layer
//! reads its input through a pre-mapping, writes its output back through a
//! post-mapping, and mixes the streams with a residual-mixing matrix that is
//! projected onto the doubly stochastic manifold by Sinkhorn-Knopp
//! normalization. Keeping the mixing matrix doubly stochastic bounds how much
//! signal and gradient magnitudes can grow across depth, which is the
//! property the diagnostics in [`stability`] measure.
//!
//! Module map:
//! - [`matrix`]: dense row-major f64 matrices and elementwise kernels
//! - [`rng`]: seeded, reproducible random generation
//! - [`sinkhorn`]: Sinkhorn-Knopp projection, diagnostics, and its VJP
//! - [`mapping`]: mapping parameterizations (unconstrained and constrained)
//! - [`stream`]: stream expansion, layer and stack propagation
//! - [`tape`]: record/replay reverse-mode differentiation
//! - [`grad`]: gradient bundles, parameter access, finite differences
//! - [`stability`]: gain magnitudes, gain profiles, heatmap exports
//! - [`sysmodel`]: per-token I/O costs, activation ledger, recompute planning

pub mod error;
pub mod grad;
pub mod mapping;
pub mod matrix;
pub mod rng;
pub mod sinkhorn;
pub mod stability;
pub mod stream;
pub mod sysmodel;
pub mod tape;

pub use error::{MhcError, Result};
pub use grad::{
    finite_difference_gradient, gradient_norm, mse_scalar, record_mean_loss, record_mse_loss,
    record_stack_forward, record_stack_params, GradientBundle, ParamAccess, ParamKey,
    StackWithInput, TapedMaps, TapedTrace, INPUT_KEY,
};
pub use mapping::{
    apply_ablation, compute_mappings, compute_mappings_hc, compute_mappings_mhc,
    compute_mappings_mhc_fused, init_params, AblationMask, InitPolicy, MappingParams, MappingSet,
    Variant,
};
pub use matrix::{Matrix, NumericConfig, DEFAULT_FD_STEP, DEFAULT_RMS_EPSILON};
pub use rng::SeededRng;
pub use sinkhorn::{ds_diagnostics, sinkhorn_project, sinkhorn_vjp, DsDiagnostics, SinkhornConfig};
pub use stability::{
    amax_gain, export_heatmap, gain_profile, noisy_identity_trace, permutation_mix,
    projected_noisy_trace, GainReport, HeatmapExport,
};
pub use stream::{
    composite_residual, expand, layer_forward, reduce, stack_forward, LayerEntry, LayerFnKind,
    LayerFunction, StackConfig, StreamState,
};
pub use sysmodel::{
    activation_ledger, io_cost, plan_recompute, plan_recompute_staged, recompute_objective,
    ActivationEntry, ActivationLedger, CostVariant, IoCostBreakdown, IoRow, RecomputePlan,
    StoragePolicy,
};
pub use tape::{NodeId, Tape};
