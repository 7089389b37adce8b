use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the whole crate.
///
/// The split mirrors how callers react: `ShapeMismatch`, `Contract` and
/// `DegenerateVector` are programming or data-construction errors and abort
/// the experiment; `Config`, `Format` and `MissingArtifact` are user-facing
/// and name the offending key, file or artifact; `NonFiniteLoss` carries
/// enough state to reproduce the failing step.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate vector in {context}: norm {norm:e} is below epsilon {epsilon:e}")]
    DegenerateVector {
        context: &'static str,
        norm: f64,
        epsilon: f64,
    },

    /// Violation of a documented precondition (empty batch, zero temperature,
    /// k larger than the corpus, ...). The message names the condition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:e}, batch rng state {rng_state:?}); \
         aborting before the update is applied"
    )]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        rng_state: [u64; 4],
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed file contents (dataset text, checkpoint binary, results file).
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// A command needs an artifact an earlier command should have produced.
    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for `Contract` with formatted text.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
