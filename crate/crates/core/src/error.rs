use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all modules of the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    /// The integrator produced a non-finite intermediate.
    #[error("integration went unstable at t = {t}")]
    Instability { t: f64 },

    /// Array shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Not enough data to carry out the requested operation.
    #[error("insufficient data for {context}: need {need}, have {have}")]
    InsufficientData {
        context: &'static str,
        need: usize,
        have: usize,
    },

    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A required input artifact is absent.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// A numeric procedure failed (divergence, unreachable target, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
