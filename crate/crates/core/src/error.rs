use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape mismatch in a tensor operation; names the offending dimension.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A non-finite value surfaced during evaluation.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Invalid configuration or argument combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Data ingestion or validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Statistical procedure precondition failure.
    #[error("stats error: {0}")]
    Stats(String),

    /// Training diverged; the per-epoch history up to the failure is attached.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        history: crate::training::History,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
