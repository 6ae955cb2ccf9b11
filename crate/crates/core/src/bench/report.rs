//! Walltime breakdown of checkpointed runs against a reference run.

use super::BenchError;
use crate::sched::Ticks;

/// Summary of one run, as needed for the breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    /// Everything that must match between paired runs except the checkpoint
    /// settings, e.g. `heatdis 64x64 np=4 tpp=2 net=ib_shm iters=100`.
    pub config: String,
    pub total: Ticks,
    /// Ticks measured inside checkpoint calls.
    pub checkpoint: Ticks,
    pub reconnects: u64,
}

pub const OVERHEAD_CSV_HEADER: &str =
    "label,total_ticks,reference_ticks,checkpoint_ticks,other_ticks,reference_pct,checkpoint_pct,other_pct,reconnects";

fn pct(part: Ticks, total: Ticks) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

/// One CSV row per run: the reference time, the measured checkpoint time and
/// whatever remains, in ticks and as shares of the run's total.
pub fn report_overhead_breakdown(
    reference: &RunRecord,
    runs: &[RunRecord],
) -> Result<String, BenchError> {
    if reference.checkpoint != 0 {
        return Err(BenchError::MismatchedRuns(format!(
            "reference `{}` spent {} ticks checkpointing",
            reference.label, reference.checkpoint
        )));
    }
    let mut out = format!("{OVERHEAD_CSV_HEADER}\n");
    for r in std::iter::once(reference).chain(runs) {
        if r.seed != reference.seed || r.config != reference.config {
            return Err(BenchError::MismatchedRuns(format!(
                "`{}` (seed {}, {}) vs reference (seed {}, {})",
                r.label, r.seed, r.config, reference.seed, reference.config
            )));
        }
        let base = reference.total.min(r.total);
        let other = r.total.saturating_sub(base + r.checkpoint);
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{}\n",
            r.label,
            r.total,
            base,
            r.checkpoint,
            other,
            pct(base, r.total),
            pct(r.checkpoint, r.total),
            pct(other, r.total),
            r.reconnects
        ));
    }
    Ok(out)
}
