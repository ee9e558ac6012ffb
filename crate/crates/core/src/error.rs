use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, found {found})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("zero vector: {what} {index} has norm below {threshold:e}")]
    ZeroVector {
        what: &'static str,
        index: usize,
        threshold: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("NNLS did not converge after {iterations} pivots")]
    NoConvergence { iterations: usize },

    #[error("concept {concept} has {available} labelled items, needs at least {required}")]
    InsufficientSamples {
        concept: usize,
        available: usize,
        required: usize,
    },

    #[error("atom has an empty support")]
    EmptySupport,

    #[error("concept {concept} data has numerical rank 0")]
    RankDeficient { concept: usize },

    #[error("cross-covariance is numerically zero; alignment is undefined")]
    DegenerateCrossCovariance,

    #[error("no queries contain concept {0}")]
    EmptyQuerySet(usize),

    #[error("item {item}: {source}")]
    Item {
        item: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: content hash mismatch (expected {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl Error {
    pub(crate) fn at_item(self, item: usize) -> Self {
        Error::Item {
            item,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by unreadable, missing or malformed inputs.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::HashMismatch { .. } => true,
            Error::Item { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
