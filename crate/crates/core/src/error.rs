//! Error type shared by every module in the engine.

use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A step index or token id is outside its valid range.
    #[error("out of range: {0}")]
    Range(String),

    /// Invalid configuration (counts, fractions, flags).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A latent or loss became non-finite; carries the schedule step where it happened.
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Misuse of the gradient tape (e.g. backward from a handle that is not on it).
    #[error("tape usage error: {0}")]
    Tape(String),

    /// An objective evaluation produced a non-finite value during gradient checking.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Checkpoint / psi-file container problems, each variant distinct on the wire.
    #[error("format version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("malformed file: {0}")]
    Malformed(String),

    /// Prompt text that does not follow the `color texture arrow pose` grammar.
    #[error("bad prompt: {0}")]
    Prompt(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
