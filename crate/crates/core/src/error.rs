use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed attribute table {path:?} line {line}: {msg}")]
    AttrTable { path: PathBuf, line: usize, msg: String },

    #[error("missing image file {0:?}")]
    MissingImage(PathBuf),

    #[error("malformed feature file {path:?}: {msg}")]
    FeatureFile { path: PathBuf, msg: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("matrix square root failed: {0}")]
    MatrixSqrt(String),

    #[error("invalid attribute vector: {0}")]
    Attributes(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Shape { .. } => "shape_mismatch",
            Error::EmptyBatch(_) => "empty_batch",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::AttrTable { .. } => "attr_table",
            Error::MissingImage(_) => "missing_image",
            Error::FeatureFile { .. } => "feature_file",
            Error::Checkpoint(_) => "checkpoint",
            Error::MatrixSqrt(_) => "matrix_sqrt",
            Error::Attributes(_) => "attributes",
            Error::Candle(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io { .. } => "io",
        }
    }

    /// Wraps an I/O failure with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { op, expected, got });
    }
    Ok(())
}
