use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token {token} is outside a vocabulary of size {vocab_size}")]
    OutOfVocabulary { token: u32, vocab_size: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("enumeration needs {required} sequences, cap is {cap}")]
    CapExceeded { required: u128, cap: u128 },

    #[error("provider cannot supply `{statistic}`: {reason}")]
    Capability { statistic: String, reason: String },

    #[error("sequence `{id}` is unscorable: {reason}")]
    Unscorable { id: String, reason: String },

    #[error("provider error{}: {message}", if *.retriable { " (retriable)" } else { "" })]
    Provider { message: String, retriable: bool },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
