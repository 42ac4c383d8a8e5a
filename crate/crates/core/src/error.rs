use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward() already ran on this tape; call reset_backward() first")]
    BackwardTwice,

    #[error("loss node must be a scalar, got dims {0:?}")]
    NotScalar([usize; 4]),

    #[error("unknown style `{0}`")]
    UnknownStyle(String),

    #[error("duplicate style name `{0}`")]
    DuplicateStyle(String),

    #[error("invalid region masks: {0}")]
    Mask(String),

    #[error("feature taps do not match: {0}")]
    TapMismatch(String),

    #[error("k-means: {0}")]
    KMeans(String),

    #[error("non-finite loss at iteration {iter} ({branch}): {detail}")]
    NonFiniteLoss {
        iter: usize,
        branch: &'static str,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
