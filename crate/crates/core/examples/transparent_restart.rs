//! Runs the heat benchmark with transparent checkpoints, kills every process
//! and restarts the job from the last manifest.

use mcr::bench::{restart_heatdis, run_heatdis, CkptMode, FaultPlan, HeatdisConfig};
use mcr::config::{JobSpec, NetConfig};
use mcr::multirail::{Runtime, RuntimeOptions};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut job = JobSpec::new(4, 2, "ib_shm");
    job.ckpt_dir = dir.path().to_path_buf();

    let mut rt = Runtime::start(job.clone(), NetConfig::builtin(), RuntimeOptions::default())?;
    let clean = run_heatdis(&mut rt, HeatdisConfig::new(32, 32, 40))?;

    let mut rt = Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default())?;
    let mut cfg = HeatdisConfig::new(32, 32, 40);
    cfg.ckpt_mode = CkptMode::Transparent;
    cfg.ckpt_every = Some(10);
    cfg.fault = Some(FaultPlan::new(25, 0..4)?);
    let halted = run_heatdis(&mut rt, cfg)?;
    let manifest = halted
        .last_manifest
        .expect("a checkpoint was taken before the fault");
    println!(
        "halted at step {}, restarting from {}",
        halted.step,
        manifest.display()
    );

    let (_, done) = restart_heatdis(&manifest, &NetConfig::builtin(), RuntimeOptions::default())?;
    println!("reconnects after restart: {}", done.counters.reconnects);
    println!("digest matches clean run: {}", done.digest == clean.digest);
    Ok(())
}
