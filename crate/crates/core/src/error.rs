use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: 6D columns are parallel or zero")]
    DegenerateRotation,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("sequence too short: {frames} frames, need at least {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss is not finite")]
    DivergedTraining { step: usize },
    #[error("audio too short: {samples} samples, need at least {needed}")]
    TooShortAudio { samples: usize, needed: usize },
    #[error("insufficient data: have {have}, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("vocabulary size {requested} is below the minimum {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("malformed token string {0:?}")]
    MalformedTokenString(String),
    #[error("missing motion part stream: {0}")]
    MissingPart(String),
    #[error("mask ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("empty {0} stream")]
    EmptyStream(String),
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("unknown task kind {0:?}")]
    UnknownTaskKind(String),
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds the limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not positive semi-definite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("no beats detected in {0}")]
    NoBeats(&'static str),
    #[error("need at least two clips, got {0}")]
    TooFewClips(usize),
    #[error("clip length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
