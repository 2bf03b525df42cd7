//! Shared error type for the core library.

/// Errors produced by core operations. Configuration problems are reported
/// before any numeric work; numeric failures carry enough context to locate
/// the offending layer or operand.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MhcError {
    #[error("shape mismatch in {op}: left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    ShapeMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer function produced a non-finite output")]
    NonFiniteOutput,

    #[error("propagation failed at layer {layer}: non-finite values")]
    NonFiniteLayer { layer: usize },

    #[error("{op}: entry {value} exceeds the safe exponent range ({limit})")]
    ExponentRange {
        op: &'static str,
        value: f64,
        limit: f64,
    },

    #[error("index out of bounds: ({row}, {col}) in a {rows}x{cols} matrix")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

pub type Result<T> = std::result::Result<T, MhcError>;

impl MhcError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MhcError::InvalidConfig(msg.into())
    }
}
