use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum SvgpcrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path} at row {row}, column {column}: {detail}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unknown annotator {0}")]
    UnknownAnnotator(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("integrity check failed for {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (this build reads version {expected}); re-create the file or migrate it")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SvgpcrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SvgpcrError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SvgpcrError>;
