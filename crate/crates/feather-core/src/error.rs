//! Error types shared across the engine.

use thiserror::Error;

/// All failure modes surfaced by the core library.
#[derive(Debug, Error)]
pub enum FeatherError {
    /// Two tensors (or a tensor and an expected shape) do not line up.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or Inf. Never propagated silently.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// A caller broke an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad input data (e.g. out-of-vocabulary symbol id).
    #[error("invalid input: {0}")]
    Input(String),

    /// Training diverged (loss or gradients went non-finite).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized bundle/dataset file is malformed or mismatched.
    #[error("bundle format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, FeatherError>;

impl FeatherError {
    /// Short machine-parsable class name, used by the CLI for exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            FeatherError::DimensionMismatch { .. } | FeatherError::Contract(_) => "contract",
            FeatherError::NonFinite { .. } | FeatherError::Diverged { .. } => "numeric",
            FeatherError::Config(_) | FeatherError::Input(_) => "config",
            FeatherError::Io(_) => "io",
            FeatherError::Format(_) => "format",
        }
    }
}
