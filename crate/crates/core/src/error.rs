use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: need at least {required} samples, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("empty Hankel: no episode has at least {required} samples")]
    EmptyHankel { required: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for {len} columns")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate column index {0} in active set")]
    DuplicateIndex(usize),

    #[error("selection size {k} exceeds column count {t}")]
    SelectionTooLarge { k: usize, t: usize },

    #[error("non-finite data: {0}")]
    NonFinite(&'static str),

    #[error("LiSSA divergence at iteration {iteration} (norm ratio {ratio:.3e}); reduce alpha")]
    Divergence { iteration: usize, ratio: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset episodes disagree on dimensions: expected m={m}, p={p}")]
    InconsistentDataset { m: usize, p: usize },

    #[error("missing run artifact: {0}")]
    MissingRun(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InsufficientData { .. } => "insufficient_data",
            Error::EmptyHankel { .. } => "empty_hankel",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DuplicateIndex(_) => "duplicate_index",
            Error::SelectionTooLarge { .. } => "selection_too_large",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InconsistentDataset { .. } => "inconsistent_dataset",
            Error::MissingRun(_) => "missing_run",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Parse { .. } => "parse",
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
