use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("gaussian lies behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("projected covariance is degenerate (det = {det:e})")]
    DegenerateCovariance { det: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gaussian {index} has no anchor recorded")]
    MissingAnchor { index: usize },

    #[error("image has no pixels")]
    EmptyImage,

    #[error("foreground mask unavailable: {0}")]
    MaskUnavailable(String),

    #[error("selection is empty")]
    EmptySelection,

    #[error("prompt latent has zero norm")]
    ZeroPrompt,

    #[error("invalid scene spec: {0}")]
    SpecValidation(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("empty input list")]
    EmptyList,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 3 for data/config problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::DegenerateCovariance { .. } | Error::BehindCamera { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
