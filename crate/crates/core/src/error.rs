use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("expected a {expected}-domain image")]
    DomainMismatch { expected: &'static str },

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("empty input list")]
    EmptyList,

    #[error("no valid pixels to reduce over")]
    EmptyValidSet,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("disparity must be strictly positive")]
    NonPositiveDisparity,

    #[error("depth must be strictly positive")]
    NonPositiveDepth,

    #[error("depth {value} outside [{min}, {max}]")]
    OutOfRangeDepth { value: f64, min: f64, max: f64 },

    #[error("no ground-truth pixel inside the evaluation range")]
    NoValidPixels,

    #[error("camera ray misses the surface at pixel ({u}, {v})")]
    NoIntersection { u: usize, v: usize },

    #[error("loss diverged at step {step}")]
    DivergenceDetected { step: usize },

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IOError",
            Error::Format(_) => "FormatError",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DomainMismatch { .. } => "DomainMismatch",
            Error::InvalidAlpha(_) => "InvalidAlpha",
            Error::EmptyList => "EmptyList",
            Error::EmptyValidSet => "EmptyValidSet",
            Error::NonFinite(_) => "NonFinite",
            Error::NonPositiveDisparity => "NonPositiveDisparity",
            Error::NonPositiveDepth => "NonPositiveDepth",
            Error::OutOfRangeDepth { .. } => "OutOfRangeDepth",
            Error::NoValidPixels => "NoValidPixels",
            Error::NoIntersection { .. } => "NoIntersection",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Json(_) => "JsonError",
        }
    }
}
