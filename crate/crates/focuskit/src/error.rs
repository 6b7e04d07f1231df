use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes documented
/// in the README (invalid input 2, I/O 3, training 4, checkpoint 5,
/// evaluation mismatch 6).
#[derive(Debug, Error)]
pub enum FocusError {
    /// Malformed on-disk data: tensor files, manifests, reports.
    #[error("format error: {0}")]
    Format(String),

    /// Data violates a domain invariant (bad labels, dimension mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration or generation spec is invalid.
    #[error("spec error: {0}")]
    Spec(String),

    /// Training failed: degenerate data, divergence, non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint and topology files disagree or are missing.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Evaluation inputs do not line up (unmatched patients).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// API misuse, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FocusError>;
