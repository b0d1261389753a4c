use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line-delimited record failed to parse or validate. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id \"{id}\"")]
    DuplicateId { kind: &'static str, id: String },

    #[error("duplicate score pair (query_id \"{query_id}\", doc_id \"{doc_id}\")")]
    DuplicatePair { query_id: String, doc_id: String },

    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,

    #[error("unknown document id \"{0}\"")]
    UnknownDocument(String),

    #[error("dimension mismatch for \"{id}\": expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown task \"{task}\"; known tasks: {}", known.join(", "))]
    UnknownTask { task: String, known: Vec<String> },

    #[error("unknown category \"{0}\"")]
    UnknownCategory(String),

    #[error(
        "no mined negatives for retrieval pair (query \"{query_id}\", positive \"{positive_id}\")"
    )]
    MissingMined {
        query_id: String,
        positive_id: String,
    },

    #[error("missing reranker score for pair (query \"{query_id}\", doc \"{doc_id}\")")]
    MissingScore { query_id: String, doc_id: String },

    /// Network or HTTP status failure talking to a scoring service. Retryable.
    #[error("transport error: {0}")]
    Transport(String),

    /// The service answered, but the answer violates the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("index file format: {0}")]
    IndexFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("stage {stage} failed for query \"{query_id}\": {source}")]
    Stage {
        stage: &'static str,
        query_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures worth retrying (network hiccups, 5xx).
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }

    /// True when the failure is a problem with inputs or settings rather than
    /// with executing a stage (I/O, the scoring service, or a stage abort).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::Transport(_)
                | Error::Protocol(_)
                | Error::MissingScore { .. }
                | Error::MissingMined { .. }
                | Error::Stage { .. }
        )
    }

    pub(crate) fn in_stage(self, stage: &'static str, query_id: &str) -> Self {
        Error::Stage {
            stage,
            query_id: query_id.to_string(),
            source: Box::new(self),
        }
    }
}
