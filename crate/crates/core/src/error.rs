use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box ({x0}, {y0}, {x1}, {y1}) does not intersect the image")]
    EmptyBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("{path}:{line}: {message}")]
    ManifestParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },

    #[error("no cached features for image {0}")]
    CacheMiss(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),

    #[error("pre-normalization norm {0:e} is below the degenerate threshold")]
    DegenerateNorm(f64),

    #[error("category {0:?} has fewer than two products")]
    SingletonCategory(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable identifier used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyBox { .. } => "EmptyBox",
            Error::InvalidBox(_) => "InvalidBox",
            Error::ManifestParse { .. } => "ManifestParse",
            Error::MissingImage(_) => "MissingImage",
            Error::Decode { .. } => "DecodeError",
            Error::CacheMiss(_) => "CacheMiss",
            Error::Shape(_) => "ShapeError",
            Error::FormatVersionMismatch { .. } => "FormatVersionMismatch",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
            Error::DegenerateNorm(_) => "DegenerateNorm",
            Error::SingletonCategory(_) => "SingletonCategory",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "IO",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
