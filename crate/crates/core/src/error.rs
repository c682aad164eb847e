//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// its exit-code contract: 1 usage/config, 2 data, 3 numeric.
#[derive(Debug, Error)]
pub enum GsvrError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error in table '{table}': id {id} out of range (vocab size {vocab})")]
    Vocab {
        table: String,
        id: usize,
        vocab: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: table '{table}': {detail}")]
    Compat { table: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GsvrError>;

impl GsvrError {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use GsvrError::*;
        match self {
            Dimension { .. } | Contract(_) | Config(_) | Checkpoint(_) => 1,
            Vocab { .. } | Data(_) | Parse { .. } | Compat { .. } | UndefinedMetric(_)
            | Io(_) => 2,
            Domain { .. } | Numeric(_) => 3,
        }
    }
}
