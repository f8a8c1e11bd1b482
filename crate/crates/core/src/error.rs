//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("insufficient records in {path}: have {have}, need {want}")]
    InsufficientRecords {
        path: String,
        have: usize,
        want: usize,
    },

    #[error("no valid records in {path}: {what}")]
    NoValidRecords { path: String, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("persona generation failed: {msg}")]
    Generation { msg: String, raw: String },

    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport {
        attempts: u32,
        msg: String,
        attempt_log: Vec<String>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("mock policy error: {0}")]
    Policy(String),

    #[error("replay gap: {} audit entr(ies) missing, first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    ReplayGap(Vec<String>),

    #[error("run directory incomplete: {0}")]
    RunIncomplete(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InsufficientRecords { .. }
            | Error::NoValidRecords { .. }
            | Error::RunIncomplete(_) => 3,
            _ => 1,
        }
    }
}
