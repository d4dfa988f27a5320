use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("ctc: target of length {target_len} needs at least {required} frames, got {frames}")]
    CtcTooShort {
        frames: usize,
        target_len: usize,
        required: usize,
    },
    #[error("ctc: token index {token} outside 1..{vocab}")]
    CtcToken { token: usize, vocab: usize },
    #[error("stream {stream} vs target {target}: {source}")]
    PitPair {
        stream: usize,
        target: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
