use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DroError>;

#[derive(Debug, Error)]
pub enum DroError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dual solver did not converge: {0}")]
    Convergence(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl DroError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        DroError::InvalidArgument(msg.into())
    }

    /// Process exit code used by the CLI: 1 usage, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DroError::InvalidArgument(_) | DroError::Domain(_) | DroError::Config(_) => 1,
            DroError::Convergence(_) | DroError::Numeric(_) | DroError::Divergence { .. } => 2,
            DroError::Checkpoint(_) | DroError::Io(_) => 3,
        }
    }
}

/// Failures when decoding a checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
