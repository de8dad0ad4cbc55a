use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// The variants map onto the process exit codes used by the command line
/// front end: configuration and contract problems are usage errors, bad
/// inputs are data errors, and non-finite values are numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gradient graph is detached: leaf #{id} ({name}) is not reachable from the loss")]
    Detached { id: usize, name: String },

    #[error("non-finite value {value} at {location}")]
    NonFinite { location: String, value: f64 },

    /// A verification run (such as the gradient suite) found a mismatch.
    #[error("check failed: {0}")]
    Check(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
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

    /// Process exit code for this error: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Detached { .. } | Error::NonFinite { .. } | Error::Check(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
