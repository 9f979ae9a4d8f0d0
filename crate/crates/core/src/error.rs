use std::path::PathBuf;

use crate::filter::FilterVerdict;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("transport failed after {attempts} attempts: {last_error}")]
    RetryExhausted { attempts: u32, last_error: String },

    #[error("request rejected with status {status}: {body}")]
    RequestRejected { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("provider does not support {0}")]
    Capability(String),

    #[error("no scripted response for {route} request (key {key})")]
    UnscriptedRequest { route: String, key: String },

    #[error("cache miss for {key} while replaying")]
    CacheMiss { key: String },

    #[error("document {doc_id} has an empty body")]
    EmptyDocument { doc_id: String },

    #[error("invalid id component {component:?}: {reason}")]
    InvalidId { component: String, reason: &'static str },

    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document {doc_id} in corpus {corpus_id}")]
    DuplicateDocument { corpus_id: String, doc_id: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("index fingerprint {found} does not match provider fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("model returned an empty generation")]
    EmptyGeneration,

    #[error("token count mismatch between perplexity results: {without} vs {with}")]
    Alignment { without: usize, with: usize },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("filter unavailable: {message}")]
    FilterUnavailable {
        message: String,
        partial: Vec<FilterVerdict>,
    },

    #[error("unknown snippet {0}")]
    UnknownSnippet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
