use std::path::PathBuf;

use thiserror::Error;

use crate::graph::ValidityReport;

pub type Result<T, E = SpnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SpnError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("layer {layer}: {message}")]
    Structure { layer: usize, message: String },

    #[error("network is not valid ({} violation(s))", .0.violations.len())]
    Invalid(Box<ValidityReport>),

    #[error("{0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("{path}: {message} (offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SpnError {
    pub(crate) fn domain(message: impl Into<String>) -> Self {
        SpnError::Domain(message.into())
    }

    pub(crate) fn structure(layer: usize, message: impl Into<String>) -> Self {
        SpnError::Structure {
            layer,
            message: message.into(),
        }
    }
}
