use std::io;
use std::path::PathBuf;

use reason3d::Error as CoreError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint digest {checkpoint} does not match config digest {config}; pass --force to evaluate anyway")]
    DigestMismatch { checkpoint: String, config: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<r3d_tensor::CheckpointError> for CliError {
    fn from(e: r3d_tensor::CheckpointError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::DigestMismatch { .. } | CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                CoreError::InfeasiblePacking(_) | CoreError::NoUnambiguousTarget(_) => EXIT_USAGE,
                CoreError::Schema(_)
                | CoreError::Config(_)
                | CoreError::Io(_)
                | CoreError::Checkpoint(_)
                | CoreError::UnknownToken(_)
                | CoreError::UnknownTask(_) => EXIT_DATA,
                CoreError::NoSegToken
                | CoreError::NoLocToken
                | CoreError::EmptyMask
                | CoreError::Invalid(_)
                | CoreError::Tensor(_) => EXIT_RUNTIME,
            },
        }
    }

    /// Stable machine-readable name for the error event.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::DigestMismatch { .. } => "digest_mismatch",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                CoreError::Tensor(_) => "tensor",
                CoreError::Checkpoint(_) => "checkpoint",
                CoreError::Io(_) => "io",
                CoreError::Schema(_) => "schema",
                CoreError::Config(_) => "config",
                CoreError::Invalid(_) => "invalid",
                CoreError::UnknownToken(_) => "unknown_token",
                CoreError::UnknownTask(_) => "unknown_task",
                CoreError::NoSegToken => "no_seg_token",
                CoreError::NoLocToken => "no_loc_token",
                CoreError::EmptyMask => "empty_mask",
                CoreError::NoUnambiguousTarget(_) => "no_unambiguous_target",
                CoreError::InfeasiblePacking(_) => "infeasible_packing",
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
