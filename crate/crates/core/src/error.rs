// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by the numerics kernels, the toy model and the editing
/// pipeline.
#[derive(Debug, Error)]
pub enum DemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A zero-norm vector reached an operation that normalizes by it.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid intervention: {0}")]
    Intervention(String),

    /// Checkpoint / receipt container problems (magic, version, layout).
    #[error("container format error: {0}")]
    Format(String),

    #[error("record validation failed at line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("receipt does not match checkpoint lineage: {0}")]
    Lineage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DemError>;
