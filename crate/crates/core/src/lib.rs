//! Graph inference learning for semi-supervised node classification.

pub mod autodiff;
mod bytes;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod hash;
pub mod model;
pub mod reachability;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod verify;

use thiserror::Error;

/// Any failure surfaced to a command-line caller.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Reach(#[from] reachability::ReachError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// 1 for numerical failure (divergence), 2 for bad input or I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Train(e) if e.is_numeric() => 1,
            _ => 2,
        }
    }
}
