//! Two application tasks and one helper on a single lane.
//!
//! The helper runs only while the application tasks wait on a message, so
//! moving redundancy work to it costs the application nothing as long as
//! the wait is long enough.

use mcr::sched::{ChannelId, CostModel, Program, SchedOptions, Scheduler, Signal, Step, TaskKind};

fn run(with_helper: bool) -> anyhow::Result<()> {
    let mut s = Scheduler::new(
        0,
        1,
        CostModel::default(),
        SchedOptions {
            io_yield: true,
            process_mode: false,
        },
    );
    let ch = ChannelId(0);
    let a = s.spawn(
        0,
        TaskKind::App,
        Program::new([Step::Compute(50), Step::Recv(ch), Step::Compute(50)]),
    )?;
    let b = s.spawn(
        0,
        TaskKind::App,
        Program::new([
            Step::WaitFor(200),
            Step::Send(ch, Signal::Token(1)),
            Step::Compute(10),
        ]),
    )?;
    if with_helper {
        s.spawn(
            0,
            TaskKind::Helper,
            Program::new([Step::Compute(60), Step::Io(80)]),
        )?;
    }
    let rep = s.run_to_completion()?;
    println!(
        "helper {with_helper:>5}: task a done at {}, task b at {}, lane busy {}, switches {}",
        rep.finish[&a], rep.finish[&b], rep.busy[0], rep.switches
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run(false)?;
    run(true)
}
