//! Library surface of the workbench binary, exposed for integration tests.

pub mod analyze;
pub mod checks;
pub mod config;
pub mod harness;

pub use config::{ExperimentConfig, Task};
