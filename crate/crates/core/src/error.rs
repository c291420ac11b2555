use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },

    #[error("invalid configuration at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("account cluster quota exceeded: at most {limit} clusters may exist at once")]
    QuotaExceeded { limit: usize },

    #[error("{0}")]
    Conflict(String),

    #[error("rejected: {0}")]
    Rejected(String),

    #[error("no more suggestions: {0}")]
    Exhausted(String),

    #[error("not a directory: {}", .0.display())]
    NotADirectory(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound {
            kind,
            id: id.into(),
        }
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by user input rather than by a defect or environment failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::NotFound { .. }
                | Error::Validation { .. }
                | Error::QuotaExceeded { .. }
                | Error::Conflict(_)
                | Error::Rejected(_)
                | Error::Exhausted(_)
                | Error::NotADirectory(_)
        )
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
