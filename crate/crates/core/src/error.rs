use std::path::PathBuf;

use crate::diffcore::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarBackward(Shape),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("depth value {value} at (row {row}, col {col}) is outside [0, 1]")]
    DepthOutOfRange { row: usize, col: usize, value: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: malformed image at byte {offset}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{}: unsupported image format (magic bytes {magic})", path.display())]
    UnsupportedFormat { path: PathBuf, magic: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {cause}", path.display())]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
