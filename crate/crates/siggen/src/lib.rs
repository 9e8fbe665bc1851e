//! Synthetic nanopore-style reads: random DNA sequences rendered to noisy
//! float signals through a k-mer level table, with heavy-tailed per-base
//! event durations and per-read translocation speed factors. Ground truth
//! (sequence, event boundaries, speed) ships with every read.

pub mod dataset;
pub mod pore;
pub mod read;

use std::path::PathBuf;

pub use dataset::{generate_dataset, load_meta, read_records, write_records, DatasetMeta, Split};
pub use pore::PoreModel;
pub use read::{generate_read, DurationLaw, GenConfig, ReadRecord};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("dataset already exists at {0}")]
    Collision(PathBuf),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
