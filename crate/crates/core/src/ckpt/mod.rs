//! Transparent whole-job checkpointing.
//!
//! A checkpoint is a collective over every task of the job. Tasks first meet
//! at a per-process barrier that elects a master, the masters then meet at a
//! job-wide token-ring barrier that also checks that no message is left
//! unmatched. Rails that cannot be saved are closed, each master writes one
//! process image, and rank 0 writes the manifest used for restart.

mod budget;
mod image;
mod manifest;
mod transparent;

use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::multirail::NetError;

pub use budget::{checkpoint_period, overhead, DomainError, Overhead};
pub use image::{
    EndpointRecord, ProcessImage, RailSection, TaskRecord, IMAGE_MAGIC, IMAGE_VERSION,
};
pub use manifest::Manifest;
pub use transparent::{checkpoint_collective, restore, CkptOutcome, Restored, Snapshot};

/// Value every task observes from one collective checkpoint call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CkptState {
    Error,
    Checkpoint,
    Restart,
    Ignore,
}

impl CkptState {
    pub fn as_str(self) -> &'static str {
        match self {
            CkptState::Error => "ERROR",
            CkptState::Checkpoint => "CHECKPOINT",
            CkptState::Restart => "RESTART",
            CkptState::Ignore => "IGNORE",
        }
    }
}

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checksum mismatch in {0}")]
    CrcMismatch(PathBuf),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("malformed {what}: {msg}")]
    Malformed { what: String, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
