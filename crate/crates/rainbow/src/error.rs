//! Crate-wide error type. Configuration problems are distinguished from
//! runtime failures so the CLI can map them to different exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad IDX magic 0x{found:08x} in {origin}: expected 0x00000801 (labels) or 0x00000803 (images)")]
    IdxMagic { origin: String, found: u32 },

    #[error("IDX data in {origin} is {found} bytes but the header promises {expected}")]
    IdxLength {
        origin: String,
        expected: usize,
        found: usize,
    },

    #[error("dataset consistency: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training failure: {0}")]
    Train(String),

    #[error("metric failure: {0}")]
    Metric(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration errors, 1 for
    /// anything that failed at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
