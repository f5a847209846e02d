use std::io;

use thiserror::Error;

/// Failure modes shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NumericOverflow(String),

    #[error("degenerate embedding: projector output has zero norm")]
    DegenerateEmbedding,

    #[error("non-finite entry in solver input")]
    NonFiniteInput,

    #[error("exact solver refuses N = {n} (cap {cap})")]
    ExactCapExceeded { n: usize, cap: usize },

    #[error("branch-and-bound node limit {0} exhausted")]
    NodeLimit(u64),

    #[error("backward already consumed this forward state")]
    StateConsumed,

    #[error("unknown name `{name}` (known: {known})")]
    UnknownName { name: String, known: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
