use std::collections::BTreeSet;

use super::BenchError;
use crate::multilevel::Multilevel;
use crate::multirail::{ProcessId, Runtime};

/// Processes to kill once a given iteration has completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultPlan {
    pub step: u64,
    pub victims: BTreeSet<ProcessId>,
}

impl FaultPlan {
    pub fn new(
        step: u64,
        victims: impl IntoIterator<Item = ProcessId>,
    ) -> Result<Self, BenchError> {
        let victims: BTreeSet<_> = victims.into_iter().collect();
        if victims.is_empty() {
            return Err(BenchError::Config(
                "a fault plan needs at least one victim".into(),
            ));
        }
        Ok(FaultPlan { step, victims })
    }

    pub fn validate(&self, iterations: u64, n_processes: usize) -> Result<(), BenchError> {
        if self.step >= iterations {
            return Err(BenchError::InvalidStep {
                step: self.step,
                iterations,
            });
        }
        if let Some(&p) = self.victims.iter().find(|&&p| p >= n_processes) {
            return Err(BenchError::Config(format!(
                "victim {p} is not one of {n_processes} processes"
            )));
        }
        Ok(())
    }

    pub fn kills_all(&self, n_processes: usize) -> bool {
        (0..n_processes).all(|p| self.victims.contains(&p))
    }
}

/// Kills the victims. Their node-local checkpoint storage goes with them
/// when a multilevel context is given.
pub fn inject_fault(
    rt: &mut Runtime,
    plan: &FaultPlan,
    ml: Option<&Multilevel>,
) -> Result<(), BenchError> {
    for &p in &plan.victims {
        match ml {
            Some(ml) => {
                ml.fail_process(rt, p)?;
            }
            None => rt.kill(p),
        }
    }
    Ok(())
}
