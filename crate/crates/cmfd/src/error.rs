use std::io;
use std::path::{Path, PathBuf};

/// Failure categories, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{0}")]
    Core(#[from] cmfd_core::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(path: impl AsRef<Path>, message: impl ToString) -> Self {
        Error::Data {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl AsRef<Path>, e: io::Error) -> Self {
        Self::data(path, e)
    }

    /// 1 for usage errors, 2 for bad or missing data, 3 for internal faults.
    pub fn exit_code(&self) -> i32 {
        use cmfd_core::Error as C;
        match self {
            Error::Usage(_) => 1,
            Error::Data { .. } => 2,
            Error::Core(C::InvalidArgument(_) | C::SkipSample(_)) => 2,
            Error::Core(C::State(_) | C::NotImplemented(_)) => 1,
            Error::Core(C::NonFinite(_)) | Error::Internal(_) => 3,
        }
    }
}
