//! File formats, configuration, parallel replication and the `tte` command
//! line on top of [`tte_core`].

pub mod cli;
pub mod config;
pub mod io;
pub mod parallel;
pub mod study;

/// Errors of the I/O layer, wrapping estimation errors from the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tte_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
}
