//! Error type shared across the crate.
//!
//! Errors are split into two families so the command-line front end can map
//! them onto exit codes: [`Error::is_usage`] returns `true` for problems with
//! user-supplied inputs (bad config, missing files, malformed artifacts) and
//! `false` for runtime failures (numerical blow-ups, I/O during a run).

use thiserror::Error;

/// Crate-wide error enumeration.
#[derive(Debug, Error)]
pub enum Error {
    /// Two array dimensions that must agree do not.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// An input failed a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Every class density underflowed to zero, so the posterior is undefined.
    /// Callers that want a fallback should use the abstention path instead.
    #[error("degenerate posterior: all class densities are zero")]
    DegeneratePosterior,

    /// Configuration file or field is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file failed structural validation.
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    /// A dataset file or its sidecar failed structural validation.
    #[error("dataset error in {path}: {reason}")]
    Dataset { path: String, reason: String },

    /// A required input file does not exist.
    #[error("missing input file: {0}")]
    MissingFile(String),

    /// Training aborted because a loss or gradient became non-finite.
    /// Carries enough context to locate the offending batch.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// A numerical verification (such as the gradient suite) ran to
    /// completion but found errors above tolerance.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error is the caller's fault (exit code 2) as opposed to a
    /// runtime failure (exit code 1).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Checkpoint { .. }
                | Error::Dataset { .. }
                | Error::MissingFile(_)
        )
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
