use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
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

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("qrels reference unknown {kind} id {id:?}")]
    DanglingReference { kind: &'static str, id: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset has no queries")]
    EmptyQueries,

    #[error("provider transport error: {0}")]
    Transport(String),

    #[error("provider returned an unusable response: {0}")]
    Provider(String),

    #[error("standardization failed for tool {tool_id:?}: {message}")]
    Standardize { tool_id: String, message: String },

    #[error("schema validation failed for {id:?}: {message}")]
    SchemaValidation { id: String, message: String },

    #[error("rewriting failed for query {query_id:?}: {message}")]
    Rewrite { query_id: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown tool id {0:?}")]
    UnknownTool(String),

    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss {loss} on triple (query {query_id:?}, positive {positive:?}, negative {negative:?})")]
    NonFiniteLoss {
        loss: f64,
        query_id: String,
        positive: String,
        negative: String,
    },

    #[error("need at least {need} queries for the split, got {have}")]
    TooFewQueries { have: usize, need: usize },

    #[error("missing artifact {path}; run `mftr {command}` first")]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input or configuration rather than by
    /// the program or its environment.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateId { .. }
                | Error::DanglingReference { .. }
                | Error::InvalidDataset(_)
                | Error::EmptyQueries
                | Error::Config(_)
                | Error::UnknownTool(_)
                | Error::TooFewQueries { .. }
                | Error::MissingArtifact { .. }
        )
    }
}
