//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants follow the failure surface of the
/// library: text ingestion, schema/shape validation, configuration,
/// runtime inputs, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text (line numbers are 1-based).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Tag or vocabulary material that does not fit the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid configuration value; `field` names the offending field.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// Runtime input that violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// Mismatched tensor/parameter layouts.
    #[error("shape error: {0}")]
    Shape(String),

    /// Datasets that are supposed to be token-aligned but are not.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A dataset with no sentences where at least one is required.
    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
