//! Training and evaluation for the base-calling models: AdamW with a
//! warm-restart cosine schedule, the four model presets plus a smoke preset,
//! the batch training loop, read-parallel base calling, and exact-alignment
//! accuracy reporting.

use std::path::PathBuf;

pub mod basecall;
pub mod eval;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod trainer;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },
    #[error("non-finite loss at step {step}; last checkpoint retained")]
    Diverged { step: u64 },
    #[error("config: {0}")]
    Config(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Core(#[from] poolcall_core::Error),
    #[error(transparent)]
    Siggen(#[from] poolcall_siggen::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
