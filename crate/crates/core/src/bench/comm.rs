//! Ping-pong microbenchmark around a transparent checkpoint.
//!
//! Rank 0 exchanges a message of each size with the first task of every other
//! process. Round trips are measured before the checkpoint (after a warm-up
//! that opens the routes), right after it (when closed routes come back on
//! demand) and once the job has settled again.

use std::fmt;

use super::BenchError;
use crate::ckpt::{checkpoint_collective, restore, CkptState};
use crate::multirail::{Runtime, RuntimeOptions, TaskRank};
use crate::sched::Ticks;

const TAG_PING: i64 = 10;
const TAG_PONG: i64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Pre,
    Transient,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Pre => "pre",
            Phase::Transient => "transient",
            Phase::Post => "post",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommConfig {
    pub sizes: Vec<usize>,
    /// Measured round trips per size and peer in the steady phases.
    pub reps: usize,
    pub with_checkpoint: bool,
    /// Continue on a runtime restored from the checkpoint rather than on
    /// the one that took it.
    pub restart: bool,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            sizes: vec![8, 1024, 65536],
            reps: 4,
            with_checkpoint: true,
            restart: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommRow {
    pub phase: Phase,
    pub size: usize,
    pub peer: TaskRank,
    pub rtt: Ticks,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommReport {
    pub rows: Vec<CommRow>,
    /// Dynamic routes on non-checkpointable rails just before the checkpoint.
    pub census: usize,
    /// Connections made after the checkpoint.
    pub reconnects: u64,
    pub ckpt_ticks: Ticks,
    pub walltime: Ticks,
}

impl CommReport {
    pub const CSV_HEADER: &'static str = "phase,size,peer,rtt_ticks";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.phase, r.size, r.peer, r.rtt));
        }
        s
    }

    /// Round trips of one phase for a given size and peer.
    pub fn rtts(&self, phase: Phase, size: usize, peer: TaskRank) -> Vec<Ticks> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase && r.size == size && r.peer == peer)
            .map(|r| r.rtt)
            .collect()
    }
}

fn peers(rt: &Runtime) -> Vec<TaskRank> {
    (1..rt.n_processes())
        .map(|p| rt.tasks_of(p)[0].rank)
        .collect()
}

fn ping_pong(rt: &mut Runtime, peer: TaskRank, size: usize) -> Result<Ticks, BenchError> {
    rt.synchronize(&[0, peer])?;
    let t0 = rt.clock(0)?;
    rt.send(0, peer, TAG_PING, vec![0xA5; size])?;
    rt.recv(peer, Some(0), Some(TAG_PING))?;
    rt.send(peer, 0, TAG_PONG, vec![0x5A; size])?;
    rt.recv(0, Some(peer), Some(TAG_PONG))?;
    Ok(rt.clock(0)? - t0)
}

fn phase(
    rt: &mut Runtime,
    cfg: &CommConfig,
    phase: Phase,
    reps: usize,
    rows: &mut Vec<CommRow>,
) -> Result<(), BenchError> {
    for &size in &cfg.sizes {
        for peer in peers(rt) {
            for _ in 0..reps {
                let rtt = ping_pong(rt, peer, size)?;
                rows.push(CommRow {
                    phase,
                    size,
                    peer,
                    rtt,
                });
            }
        }
    }
    Ok(())
}

/// Runs the benchmark. The returned runtime is the restored one when
/// `cfg.restart` is set.
pub fn run_comm_bench(
    mut rt: Runtime,
    cfg: &CommConfig,
) -> Result<(Runtime, CommReport), BenchError> {
    if rt.n_processes() < 2 {
        return Err(BenchError::Config(
            "the comm bench needs at least 2 processes".into(),
        ));
    }
    let mut rows = Vec::new();
    phase(&mut rt, cfg, Phase::Warmup, 1, &mut rows)?;
    phase(&mut rt, cfg, Phase::Pre, cfg.reps, &mut rows)?;
    let census = rt.dynamic_route_census();
    let mut ckpt_ticks = 0;
    if cfg.with_checkpoint {
        let out = checkpoint_collective(&mut rt, &|_| Vec::new());
        if out.state != CkptState::Checkpoint {
            return Err(BenchError::CheckpointFailed(out.detail.unwrap_or_default()));
        }
        ckpt_ticks = out.ticks();
        if cfg.restart {
            let manifest = out
                .manifest
                .expect("successful checkpoints write a manifest");
            let opts = RuntimeOptions {
                job_id: rt.job_id().to_string(),
                ..RuntimeOptions::default()
            };
            rt = restore(&manifest, &rt.net().clone(), None, opts)?.runtime;
        }
    }
    let connects_before = rt.on_demand_connects();
    phase(&mut rt, cfg, Phase::Transient, 1, &mut rows)?;
    phase(&mut rt, cfg, Phase::Post, cfg.reps, &mut rows)?;
    let reconnects = rt.on_demand_connects() - connects_before;
    let walltime = rt.walltime();
    Ok((
        rt,
        CommReport {
            rows,
            census,
            reconnects,
            ckpt_ticks,
            walltime,
        },
    ))
}
