use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{inputs} inputs would enumerate 2^{inputs} modes; at most {max} inputs are supported")]
    Capacity { inputs: usize, max: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("numerical failure in mode {mode}: {message}")]
    Numerical { mode: usize, message: String },

    #[error("malformed document: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
