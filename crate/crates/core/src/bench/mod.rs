//! Deterministic benchmarks and the reports built from them.

mod comm;
mod fault;
mod heatdis;
mod report;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ckpt::CkptError;
use crate::multilevel::{CkptLevel, MlError};
use crate::multirail::NetError;

pub use comm::{run_comm_bench, CommConfig, CommReport, CommRow, Phase};
pub use fault::{inject_fault, FaultPlan};
pub use heatdis::{
    grid_digest, recover_heatdis, restart_heatdis, run_heatdis, Heatdis, HeatdisConfig,
    HeatdisCounters, HeatdisReport,
};
pub use report::{report_overhead_breakdown, RunRecord, OVERHEAD_CSV_HEADER};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("fault step {step} is not before iteration count {iterations}")]
    InvalidStep { step: u64, iterations: u64 },
    #[error("runs differ: {0}")]
    MismatchedRuns(String),
    #[error("checkpoint failed: {0}")]
    CheckpointFailed(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Multilevel(#[from] MlError),
    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

/// How a benchmark protects its state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptMode {
    None,
    Transparent,
    App(CkptLevel),
}

impl fmt::Display for CkptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CkptMode::None => f.write_str("none"),
            CkptMode::Transparent => f.write_str("transparent"),
            CkptMode::App(l) => write!(f, "l{}", l.as_u8()),
        }
    }
}

impl FromStr for CkptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(CkptMode::None),
            "transparent" => Ok(CkptMode::Transparent),
            _ => s
                .strip_prefix('l')
                .and_then(|d| d.parse().ok())
                .and_then(CkptLevel::from_u8)
                .map(CkptMode::App)
                .ok_or_else(|| {
                    format!("unknown checkpoint mode `{s}` (none, transparent, l1..l4)")
                }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ckpt_mode_round_trip() {
        for s in ["none", "transparent", "l1", "l2", "l3", "l4"] {
            assert_eq!(s.parse::<CkptMode>().unwrap().to_string(), s);
        }
        assert!("l5".parse::<CkptMode>().is_err());
        assert!("l0".parse::<CkptMode>().is_err());
    }
}
