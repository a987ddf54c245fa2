use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token `{token}` for language `{lang}`")]
    UnknownToken { token: String, lang: String },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite loss {loss} at step {step}; parameters left unchanged")]
    NonFiniteLoss { loss: f64, step: u64 },

    #[error("model is a frozen expert and cannot be mutated")]
    FrozenExpert,

    #[error("pseudo corpus was generated by expert {expected}, but the supplied expert hashes to {actual}")]
    ExpertHashMismatch { expected: String, actual: String },

    #[error("language weights are missing `{0}`")]
    MissingWeight(String),

    #[error("missing direction {0}")]
    MissingDirection(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl std::fmt::Display) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.to_string(),
        }
    }

    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::UnknownToken { .. } => "unknown_token",
            Error::UnknownLanguage(_) => "unknown_language",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Empty(_) => "empty",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::FrozenExpert => "frozen_expert",
            Error::ExpertHashMismatch { .. } => "expert_hash_mismatch",
            Error::MissingWeight(_) => "missing_weight",
            Error::MissingDirection(_) => "missing_direction",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}
