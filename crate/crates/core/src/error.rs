use std::path::PathBuf;

use thiserror::Error;
use crate::model::checkpoint::CheckpointError;


#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule ordering violated: gamma_s = {gamma_s} < gamma_t = {gamma_t}")]
    Ordering { gamma_t: f64, gamma_s: f64 },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("non-finite loss at batch row {row}")]
    NonFiniteLoss { row: usize },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("inconsistent sampler state: {0}")]
    InconsistentState(String),

    #[error("missing input file {0}")]
    MissingInput(PathBuf),


    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
