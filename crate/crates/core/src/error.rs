use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("problem too large: {cells} cells exceeds limit {limit}")]
    TooLarge { cells: usize, limit: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("all grid cells failed")]
    AllCellsFailed,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
