use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("task `{task}`: cannot read {}: {source}", path.display())]
    TaskIo {
        task: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: pool is empty", path.display())]
    EmptyPool { path: PathBuf },

    #[error("task `{task}`: query set is empty")]
    EmptyQuerySet { task: String },

    #[error("{}: corrupt shard: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },

    #[error("{}: bad manifest: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("zero vector at {role} index {index}: cosine similarity is undefined")]
    ZeroVector { role: &'static str, index: usize },

    #[error("non-finite value in {role} row {index}")]
    NonFinite { role: &'static str, index: usize },

    #[error("token count must be at least 1")]
    ZeroLength,

    #[error("sample {pool_index}: {span} span is empty")]
    EmptySpan { pool_index: usize, span: String },

    #[error("sample {pool_index}: invalid token spans: {message}")]
    InvalidSpans { pool_index: usize, message: String },

    #[error("pool store contains no embeddings")]
    EmptyStore,

    #[error("pool blocks out of order: expected start {expected}, got {found}")]
    BlockOrder { expected: usize, found: usize },

    #[error("k must be at least 1")]
    InvalidK,

    #[error("dense score matrix of {cells} cells exceeds the limit of {limit}")]
    DenseTooLarge { cells: usize, limit: usize },

    #[error("sample {pool_index}: token count is zero")]
    ZeroTokenCount { pool_index: usize },

    #[error("requested {requested} samples but only {available} are available")]
    NotEnough { requested: usize, available: usize },

    #[error("requested {requested} samples but only {eligible} are eligible")]
    InsufficientEligible { requested: usize, eligible: usize },

    #[error("top-k list of query {query} exhausted after {len} entries; rerun with a larger k")]
    TopKExhausted { query: usize, len: usize },

    #[error("task `{task}` exhausted its score table after {len} entries; rerun with a larger k")]
    TaskExhausted { task: String, len: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("arithmetic overflow evaluating {0}")]
    Overflow(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            message: message.into(),
        }
    }
}
