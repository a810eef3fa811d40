use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("template {template}: {reason}")]
    Validation { template: String, reason: String },

    #[error("pack: {0}")]
    Pack(String),

    #[error("unknown token {token:?}")]
    Vocabulary { token: String },

    #[error("sequence of length {len} exceeds max context {max}")]
    Context { len: usize, max: usize },

    #[error("non-finite loss {loss} at step {step} (lr {lr:e})")]
    NonFinite { step: usize, lr: f64, loss: f64 },

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    Layer { layer: usize, n_layers: usize },

    #[error("degenerate rank: {0}")]
    DegenerateRank(String),

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("scorer failed on {id}: {reason}")]
    Scorer { id: String, reason: String },

    #[error("protocol error: {reason}: {line:?}")]
    Protocol { reason: String, line: String },

    #[error("timed out waiting for response to {id}")]
    Timeout { id: String },

    #[error("schema version mismatch in {what}: expected {expected}, found {found}")]
    Schema {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("evaluator {name} failed at epoch {epoch}: {source}")]
    Hook {
        name: String,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    /// Machine-readable category printed by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Capacity(_) => "CAPACITY",
            Error::Argument(_) => "BAD_ARGUMENT",
            Error::Validation { .. } | Error::Pack(_) => "VALIDATION",
            Error::Vocabulary { .. } => "UNKNOWN_TOKEN",
            Error::Context { .. } => "CONTEXT_OVERFLOW",
            Error::NonFinite { .. } => "NON_FINITE",
            Error::Layer { .. } => "BAD_ARGUMENT",
            Error::DegenerateRank(_) => "DEGENERATE_RANK",
            Error::EmptyEvaluation | Error::EmptyInput(_) => "EMPTY_INPUT",
            Error::Scorer { .. } => "SCORER",
            Error::Protocol { .. } => "PROTOCOL",
            Error::Timeout { .. } => "TIMEOUT",
            Error::Schema { .. } => "SCHEMA_MISMATCH",
            Error::Hook { source, .. } | Error::Stage { source, .. } => source.category(),
            Error::Io { .. } => "IO",
            Error::Json(_) | Error::Toml(_) => "PARSE",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}
