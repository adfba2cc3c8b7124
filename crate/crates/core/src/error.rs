//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by groupreg.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two fields that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The data cannot support the requested estimate (e.g. a constant image).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// A structured document failed to parse.
    #[error("parse error in section `{section}`: {message}")]
    Parse { section: String, message: String },

    /// A binary volume had an inconsistent layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A file was written by an incompatible version.
    #[error("incompatible version: found `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },

    /// A configuration value is out of range.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Filesystem failure, annotated with the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            section: section.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
