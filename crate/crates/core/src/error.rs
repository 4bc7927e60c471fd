use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("template would contain only [MASK] tokens")]
    AllMasked,

    #[error("no templates survived: {0}")]
    EmptyResult(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("invalid question: {0}")]
    InvalidQuestion(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("requested top-{k} from a corpus of {corpus} templates")]
    KTooLarge { k: usize, corpus: usize },

    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,

    #[error("answer {answer:?} not found in context at char offset {offset}")]
    AnswerNotInContext { answer: String, offset: usize },

    #[error("formatted input has {len} tokens, limit is {limit}")]
    InputTooLong { len: usize, limit: usize },

    #[error("retrieval returned an empty pool")]
    EmptyPool,

    #[error("stale retrieval pool: encoded with encoder version {pool}, live encoder is {live}")]
    StaleIndex { pool: u64, live: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage `{stage}` requires `{missing}` to be completed first")]
    StageDependency { stage: String, missing: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Stable machine-readable name used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::AllMasked => "AllMasked",
            Error::EmptyResult(_) => "EmptyResult",
            Error::InvalidTemplate(_) => "InvalidTemplate",
            Error::InvalidQuestion(_) => "InvalidQuestion",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::AnswerNotInContext { .. } => "AnswerNotInContext",
            Error::InputTooLong { .. } => "InputTooLong",
            Error::EmptyPool => "EmptyPool",
            Error::StaleIndex { .. } => "StaleIndex",
            Error::Validation(_) => "Validation",
            Error::StageDependency { .. } => "StageDependency",
            Error::Config(_) => "Config",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
        }
    }

    /// Process exit code: 2 for bad input, 3 for out-of-order stages, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StageDependency { .. } => 3,
            Error::Validation(_)
            | Error::AnswerNotInContext { .. }
            | Error::InvalidTemplate(_)
            | Error::InvalidQuestion(_)
            | Error::Config(_)
            | Error::Json { .. }
            | Error::EmptyResult(_)
            | Error::EmptyCorpus
            | Error::KTooLarge { .. }
            | Error::InputTooLong { .. } => 2,
            _ => 1,
        }
    }
}
