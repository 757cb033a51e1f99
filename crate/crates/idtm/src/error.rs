use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub fn corpus(line: usize, msg: impl Into<String>) -> Self {
        Error::Corpus { line, msg: msg.into() }
    }
}
