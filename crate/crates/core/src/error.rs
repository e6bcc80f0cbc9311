use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate product id {0:?}")]
    DuplicateId(String),

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("product {0:?} has a title with no tokens")]
    EmptyTitle(String),

    #[error("query {query:?} references unknown product id {id:?}")]
    UnknownProduct { query: String, id: String },

    #[error("EmptyQuery: text has no tokens")]
    EmptyQuery,

    #[error("NoScorableCandidates: every candidate for {0:?} had an undefined score")]
    NoScorableCandidates(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("unknown quality label {0:?} (expected yes or no)")]
    UnknownLabel(String),

    #[error("AmbiguousSeparator: thought {0:?} contains the ';' separator")]
    AmbiguousSeparator(String),

    #[error("invalid template field: {0}")]
    InvalidField(String),

    #[error("prompt does not match the {task} template")]
    TemplateMismatch { task: &'static str },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("invalid encoded example: {0}")]
    InvalidExample(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("UnsortedRewards: rewards must be strictly decreasing, got {0:?}")]
    UnsortedRewards(Vec<f64>),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scorer {0:?}")]
    UnknownScorer(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
