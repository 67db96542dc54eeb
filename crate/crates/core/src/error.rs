use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A model or run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called outside its contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a value-level precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("record `{id}`: {kind}")]
    Validation { id: String, kind: ValidationKind },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// The distinct ways a manifest record can fail validation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationKind {
    #[error("no class labels")]
    NoLabels,
    #[error("empty class label")]
    EmptyLabel,
    #[error("duplicate class label `{0}` after normalization")]
    DuplicateLabel(String),
    #[error("missing mask for label `{label}` ({path})")]
    MissingMask { label: String, path: String },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("non-binary mask for label `{label}`: found value {value}")]
    NonBinaryMask { label: String, value: u8 },
    #[error("size mismatch: image is {image_w}x{image_h}, {what} is {w}x{h}")]
    SizeMismatch {
        what: String,
        image_w: u32,
        image_h: u32,
        w: u32,
        h: u32,
    },
    #[error("unreadable image {path}: {reason}")]
    Unreadable { path: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
