use thiserror::Error;

/// Errors surfaced by the decoding engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    #[error("context of length {len} exceeds model maximum {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("non-finite gradient encountered ({0})")]
    NonFiniteGradient(String),

    #[error("training diverged: validation loss became non-finite at epoch {epoch}")]
    DivergedTraining { epoch: usize },

    #[error("constraint target length {got} does not match sequence length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty reference")]
    EmptyReference,

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("schema error: missing or invalid field {field}")]
    SchemaError { field: String },

    #[error("checkpoint format version {got} does not match expected {expected}")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
