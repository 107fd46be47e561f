use std::io;

use r3d_tensor::{CheckpointError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    /// Malformed or incompatible input data (point files, datasets, vocabularies).
    #[error("schema: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("generated answer has no [SEG] token")]
    NoSegToken,
    #[error("generated answer has no [LOC] token")]
    NoLocToken,
    #[error("mask has no foreground points")]
    EmptyMask,
    #[error("no unambiguous target: {0}")]
    NoUnambiguousTarget(String),
    #[error("cannot pack scene: {0}")]
    InfeasiblePacking(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
