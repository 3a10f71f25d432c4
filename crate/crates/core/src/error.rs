use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// CLI exit code: 2 for data/format problems, 3 for numeric failures,
    /// 1 for everything the user can fix on the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Format(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
            Error::Tensor(TensorError::NonFinite { .. }) => 3,
            Error::Tensor(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
