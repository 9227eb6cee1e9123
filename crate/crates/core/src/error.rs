use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("loss has no unmasked positions")]
    EmptyLoss,

    #[error("graph state: {0}")]
    GraphState(String),

    #[error("sequence of length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("character {0:?} is outside the tokenizer alphabet")]
    Alphabet(char),

    #[error("unknown domain `{0}`")]
    Domain(String),

    #[error("response span misaligned: {0}")]
    Alignment(String),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("training diverged at {stage} step {step}: loss {loss}")]
    Divergence {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("engine state: {0}")]
    State(String),

    #[error("engine {index} failed: {cause}")]
    Engine { index: usize, cause: Box<Error> },

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
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
}
