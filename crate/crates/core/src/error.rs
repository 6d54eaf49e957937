use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid workspace path: {0:?}")]
    InvalidPath(String),

    #[error("path collision after normalization: {0}")]
    PathCollision(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unknown session: {0}")]
    UnknownSession(String),

    #[error("expected_version {expected} for {path} disagrees with observed version {observed}")]
    ExpectedVersionMismatch {
        path: String,
        expected: u64,
        observed: u64,
    },

    #[error("session {session} does not hold the reservation on {path}")]
    NotHolder { path: String, session: String },

    #[error("binary content: {0}")]
    Binary(String),

    #[error("malformed patch: {0}")]
    Patch(String),

    #[error("event log: {0}")]
    EventLog(String),

    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
}

impl Error {
    /// Short machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidPath(_) => "invalid_path",
            Error::PathCollision(_) => "path_collision",
            Error::NotFound(_) => "not_found",
            Error::UnknownSession(_) => "unknown_session",
            Error::ExpectedVersionMismatch { .. } => "protocol_error",
            Error::NotHolder { .. } => "not_holder",
            Error::Binary(_) => "binary_content",
            Error::Patch(_) => "malformed_patch",
            Error::EventLog(_) => "event_log",
            Error::Io { .. } | Error::Storage(_) => "storage",
        }
    }
}
