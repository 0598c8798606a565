//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CamError>;

#[derive(Debug, Error)]
pub enum CamError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("context overflow: {len} positions exceed the maximum context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("prompt overflow: prompt length {len} exceeds the context window {max}")]
    PromptOverflow { len: usize, max: usize },

    #[error("kv cache does not match the model: {0}")]
    CacheMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: u64,
        detail: String,
    },

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: corrupt at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("sequence {index} has length {len}, shorter than the requested crop {crop}")]
    SequenceTooShort {
        index: usize,
        len: usize,
        crop: usize,
    },

    #[error("unstable transition matrix: spectral radius {rho:.6} >= 1")]
    UnstableProcess { rho: f64 },

    #[error("insufficient samples for covariance estimation: {count} <= feature dim {feature_dim}")]
    InsufficientSamples { count: usize, feature_dim: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 config, 3 numeric, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CamError::DimensionMismatch { .. }
            | CamError::ContextOverflow { .. }
            | CamError::PromptOverflow { .. }
            | CamError::CacheMismatch(_)
            | CamError::InvalidConfig(_)
            | CamError::ConfigHashMismatch { .. }
            | CamError::SequenceTooShort { .. }
            | CamError::UnstableProcess { .. }
            | CamError::InsufficientSamples { .. } => 2,
            CamError::NonFinite { .. } => 3,
            CamError::BadMagic { .. }
            | CamError::VersionMismatch { .. }
            | CamError::Corrupt { .. }
            | CamError::Io { .. } => 4,
        }
    }
}
