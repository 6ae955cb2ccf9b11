//! Protects one region per task, checkpoints at each level and recovers
//! after losing processes.

use std::collections::BTreeSet;

use mcr::config::{JobSpec, NetConfig};
use mcr::multilevel::{fti_init, CkptLevel, GroupConfig, MultilevelOptions};
use mcr::multirail::{Runtime, RuntimeOptions};

fn main() -> anyhow::Result<()> {
    // (level, processes lost)
    let cases = [
        (CkptLevel::L1, vec![]),
        (CkptLevel::L2, vec![1]),
        (CkptLevel::L3, vec![2]),
        (CkptLevel::L4, vec![0, 1, 2, 3]),
    ];
    for (level, lost) in cases {
        let dir = tempfile::tempdir()?;
        let mut job = JobSpec::new(4, 2, "shm");
        job.ckpt_dir = dir.path().to_path_buf();
        let mut rt = Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default())?;
        let opts = MultilevelOptions {
            group: GroupConfig {
                k: 4,
                m: 2,
                partner_offset: 1,
            },
            ..MultilevelOptions::default()
        };
        let mut ml = fti_init(&mut rt, opts)?;
        let world = ml.world().ranks.clone();
        for &r in &world {
            ml.protect(
                r,
                0,
                8,
                (0..64u64)
                    .map(|x| x * r as u64)
                    .flat_map(u64::to_le_bytes)
                    .collect(),
            )?;
        }
        let report = ml.checkpoint(&mut rt, level)?;
        let before: Vec<Vec<u8>> = world
            .iter()
            .map(|&r| ml.region(r, 0).unwrap().to_vec())
            .collect();
        for &p in &lost {
            ml.fail_process(&mut rt, p)?;
        }
        for &r in &world {
            ml.update(r, 0, &vec![0; 512])?;
        }
        let rec = ml.recover(&mut rt, CkptLevel::L1)?;
        let intact = world
            .iter()
            .zip(&before)
            .all(|(&r, b)| ml.region(r, 0) == Some(b.as_slice()));
        println!(
            "{level:?}: wrote {} bytes, lost {lost:?}, recovered epoch {} from {:?}, intact {intact}",
            report.bytes_written,
            rec.epoch,
            rec.sources.values().map(|s| format!("{s:?}")).collect::<BTreeSet<_>>()
        );
    }
    Ok(())
}
