//! Round trips from rank 0 before and after a transparent checkpoint.
//!
//! Routes on the rdma rail are closed by the checkpoint, so the first round
//! trip to a non-neighbour process afterwards pays for a reconnect.

use mcr::bench::{run_comm_bench, CommConfig, Phase};
use mcr::config::{JobSpec, NetConfig};
use mcr::multirail::{Runtime, RuntimeOptions};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut job = JobSpec::new(6, 2, "ib_shm");
    job.ckpt_dir = dir.path().to_path_buf();
    let rt = Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default())?;
    let cfg = CommConfig {
        sizes: vec![8, 65536],
        ..CommConfig::default()
    };
    let (rt, rep) = run_comm_bench(rt, &cfg)?;

    println!("size,peer,pre,transient,post");
    for &size in &cfg.sizes {
        for p in 1..rt.n_processes() {
            let peer = rt.tasks_of(p)[0].rank;
            let first = |ph| rep.rtts(ph, size, peer)[0];
            println!(
                "{size},{peer},{},{},{}",
                first(Phase::Pre),
                first(Phase::Transient),
                first(Phase::Post)
            );
        }
    }
    println!(
        "census {}, reconnects {}, checkpoint {} ticks",
        rep.census, rep.reconnects, rep.ckpt_ticks
    );
    Ok(())
}
