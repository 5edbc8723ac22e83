use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("layer {0} is not an MoE layer")]
    NotMoeLayer(usize),

    #[error("MoE layer {layer} keeps {retained} experts, at least 2 are needed for top-2 routing")]
    TooFewExperts { layer: usize, retained: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("counter overflow in layer {layer}, expert {expert}")]
    CounterOverflow { layer: usize, expert: usize },

    #[error("no tokens recorded for layer {layer} under key {key}")]
    EmptyStats { layer: usize, key: String },

    #[error("statistics missing for direction(s): {0}")]
    MissingDirection(String),

    #[error("metric layer {0} is all zero and cannot be normalized")]
    ZeroLayer(usize),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("invalid budget: {0}")]
    Budget(String),

    #[error("pruning is infeasible: {0}")]
    Infeasible(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("{0}")]
    Invalid(String),

    #[error("parse error in {what}, line {line}: {msg}")]
    Parse { what: String, line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} already exists (pass --force to overwrite)")]
    Exists { path: PathBuf },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
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

    pub(crate) fn parse(what: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            line,
            msg: msg.into(),
        }
    }
}
