//! Loads a network configuration and shows which rail each message lands on.
//!
//! Ring neighbours keep using the ring they were bootstrapped on. Other
//! peers get a route on demand, on the first open rail whose gates accept
//! the message.

use mcr::config::{parse_config, JobSpec};
use mcr::multirail::{Runtime, RuntimeOptions};

const CONF: &str = "\
config fast_cfg { driver = mock_rdma }
config ring_cfg { driver = inproc }

rail fast { priority = 20; topology = none; config = fast_cfg; gate minsize = 4KB }
rail ring { priority = 1; topology = ring; config = ring_cfg }

option demo { rails = fast, ring }
";

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let net = parse_config(CONF)?;
    let mut job = JobSpec::new(5, 1, "demo");
    job.ckpt_dir = dir.path().to_path_buf();
    let mut rt = Runtime::start(job, net, RuntimeOptions::default())?;

    for (dst, size) in [(1, 64), (2, 8192), (2, 64), (3, 8192)] {
        let r = rt.send(0, dst, 0, vec![0; size])?;
        rt.recv(dst, Some(0), Some(0))?;
        println!(
            "0 -> {dst}, {size:>5} bytes: rail {:<4} on demand: {}",
            r.rail.unwrap_or_default(),
            r.connected_on_demand
        );
    }
    println!(
        "dynamic routes on non-checkpointable rails: {}",
        rt.dynamic_route_census()
    );
    Ok(())
}
