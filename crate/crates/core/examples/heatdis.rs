//! Heat diffusion on a few decompositions: the digest never changes, the
//! virtual time does.

use mcr::bench::{run_heatdis, HeatdisConfig};
use mcr::config::{JobSpec, NetConfig};
use mcr::multirail::{Runtime, RuntimeOptions};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    println!("np,tpp,net,residual,ticks,digest");
    for (np, tpp, net) in [
        (1, 1, "shm"),
        (2, 2, "shm"),
        (4, 2, "ib_shm"),
        (4, 2, "multirail_tcp"),
    ] {
        let mut job = JobSpec::new(np, tpp, net);
        job.ckpt_dir = dir.path().to_path_buf();
        let mut rt = Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default())?;
        let rep = run_heatdis(&mut rt, HeatdisConfig::new(64, 64, 50))?;
        println!(
            "{np},{tpp},{net},{:.6},{},{}",
            rep.residual,
            rep.walltime,
            &hex::encode(rep.digest)[..16]
        );
    }
    Ok(())
}
