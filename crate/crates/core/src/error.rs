use std::path::PathBuf;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point has non-positive camera depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular 2d covariance for gaussian {index} (det = {det})")]
    SingularCovariance { index: usize, det: f64 },
    #[error("face box lies outside the source frustum")]
    BoxOutsideFrustum,
    #[error("invalid face box: {0}")]
    InvalidBox(String),
    #[error("camera centers differ by {0} m")]
    CameraCenterMismatch(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("no pixels in the overlap of rendered and ground-truth masks")]
    EmptyOverlap,
    #[error("empty evaluation mask")]
    EmptyMask,
    #[error("non-finite loss at iteration {iteration}: {what}")]
    NonFiniteLoss { iteration: usize, what: String },
    #[error("camera placement rejected {0} times")]
    RejectionExhausted(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("dataset validation failed: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
