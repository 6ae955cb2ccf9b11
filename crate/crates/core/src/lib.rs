//! A deterministic message-passing runtime simulator with multi-rail
//! networking, routed signaling, user-level task scheduling, and two
//! checkpointing strategies: transparent whole-job images and multilevel
//! application checkpoints with Reed-Solomon redundancy.
//!
//! Everything runs in virtual time, so reports are reproducible bit for bit.

pub mod bench;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod kvs;
pub mod multilevel;
pub mod multirail;
pub mod sched;
pub mod signaling;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Net(#[from] multirail::NetError),
    #[error(transparent)]
    Kvs(#[from] kvs::KvsError),
    #[error(transparent)]
    Sched(#[from] sched::SchedError),
    #[error(transparent)]
    Ckpt(#[from] ckpt::CkptError),
    #[error(transparent)]
    Multilevel(#[from] multilevel::MlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
