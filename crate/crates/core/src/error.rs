use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    /// A loss or gradient became non-finite. `term` names the offending quantity.
    #[error("numeric divergence in {term}")]
    Divergence { term: String },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("protocol error from client {client}: {reason}")]
    Protocol { client: usize, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn divergence(term: impl Into<String>) -> Self {
        Error::Divergence { term: term.into() }
    }

    /// True when the error (or the client error it wraps) is a numeric divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::Client { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
