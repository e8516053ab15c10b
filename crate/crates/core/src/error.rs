use thiserror::Error;

/// Errors raised by the library. Variants follow the failure classes the
/// operations document (configuration, capability, domain, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Capability(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("trajectory diverged after step {last_finite_step}")]
    Divergence { last_finite_step: usize },

    #[error("absolute continuity violated: dataset {dataset} puts mass on set {set} which has zero prior weight")]
    AbsoluteContinuity { dataset: usize, set: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
