//! Checkpoint period and overhead for a few budgets.
//!
//! ```text
//! cargo run --example budget
//! ```

use mcr::ckpt::{checkpoint_period, overhead};

fn main() -> anyhow::Result<()> {
    let ts = 86_400.0; // one day of failure-free work
    let tc = 60.0;
    println!("budget,tau_seconds,walltime_seconds,overhead_factor");
    for b in [0.01, 0.05, 0.1] {
        let tau = checkpoint_period(tc, b)?;
        let o = overhead(ts, tc, tau)?;
        println!("{b},{tau},{:.1},{:.4}", o.d, o.ovh);
    }
    Ok(())
}
