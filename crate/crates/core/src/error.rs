use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the engine.
///
/// Variants are grouped by how callers should react: configuration and
/// validation problems (bad shapes, bad parameters, schema mismatches) are
/// detectable before any real work starts, while I/O, corruption, and
/// retrieval failures happen mid-run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid parameter {name}: {message}")]
    Parameter { name: &'static str, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bank schema mismatch for {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("bad bank format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupted data (entry {entry_id}): {message}")]
    Corruption { entry_id: u64, message: String },

    #[error("retrieval failed for entry {entry_id}: {message}")]
    Retrieval { entry_id: u64, message: String },

    #[error("bank incompatible with encoder: bank {bank}, encoder {encoder}")]
    BankIncompatible { bank: String, encoder: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller could have prevented by validating inputs
    /// (used by the CLI to pick exit code 2 over 1).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::Parameter { .. }
                | Error::Config(_)
                | Error::Schema { .. }
                | Error::Format { .. }
                | Error::BankIncompatible { .. }
        )
    }
}
