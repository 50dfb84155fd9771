use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape/axis mismatch between tensors. `axis` names the offending axis.
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Geometric input is unusable (collinear landmarks, empty ROI, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    /// Metric computation over degenerate input (e.g. single-class labels).
    #[error("metric error: {0}")]
    Metric(String),

    /// Malformed or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or data file could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { axis, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
