use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was attempted on an object that is not ready for it,
    /// e.g. running a network whose parameters were never initialized.
    #[error("invalid state: {0}")]
    State(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    /// A NaN or infinity showed up in a computation that must stay finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A synthetic sample could not be produced within the retry budget.
    #[error("sample skipped: {0}")]
    SkipSample(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
