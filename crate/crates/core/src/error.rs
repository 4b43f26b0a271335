use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("utterance too short: {have} samples, need at least {need}")]
    TooShort { have: usize, need: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("signal is silent (zero power)")]
    Silent,
    #[error("too few frames: {have}, need at least {need}")]
    TooFewFrames { have: usize, need: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("scores must contain both target and non-target trials")]
    SingleClass,
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("non-finite loss at step {step}; batch augmentation log:\n{dump}")]
    NonFinite { step: usize, dump: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing audio file {0}")]
    MissingFile(PathBuf),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
