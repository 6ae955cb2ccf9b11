//! User-level cooperative scheduler over simulated lanes.
//!
//! Each lane stands for one pinned OS thread. Tasks are cooperative: a task
//! keeps its lane until it yields, blocks, or finishes. Time is virtual and
//! derived from a [`CostModel`], so every schedule is reproducible.
//!
//! Context switches are charged when a lane hands off, at the instant a task
//! releases it, to a task that is already ready (including the releasing task
//! itself after an explicit yield). A task woken onto an idle lane resumes
//! without a switch charge.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

pub type Ticks = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub compute_tick: Ticks,
    pub net_per_byte: Ticks,
    pub local_write_per_byte: Ticks,
    pub encode_per_byte: Ticks,
    /// Cost of one user-level context switch.
    pub ctx_switch: Ticks,
    pub pfs_per_byte: Ticks,
    /// Factor applied to `ctx_switch` when emulating process-level helpers.
    pub process_switch_multiplier: Ticks,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            compute_tick: 1,
            net_per_byte: 1,
            local_write_per_byte: 1,
            encode_per_byte: 2,
            ctx_switch: 5,
            pfs_per_byte: 4,
            process_switch_multiplier: 10,
        }
    }
}

impl CostModel {
    pub fn process_ctx_switch(&self) -> Ticks {
        self.ctx_switch * self.process_switch_multiplier
    }
}

/// Monotone virtual clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now: Ticks,
}

impl VirtualClock {
    pub fn at(now: Ticks) -> Self {
        VirtualClock { now }
    }

    pub fn now(&self) -> Ticks {
        self.now
    }

    pub fn advance(&mut self, by: Ticks) -> Ticks {
        self.now += by;
        self.now
    }

    /// Moves forward to `t` if it lies in the future; never moves back.
    pub fn advance_to(&mut self, t: Ticks) -> Ticks {
        self.now = self.now.max(t);
        self.now
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    App,
    Helper,
}

impl TaskKind {
    pub fn code(self) -> u8 {
        match self {
            TaskKind::App => 0,
            TaskKind::Helper => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TaskKind::App),
            1 => Some(TaskKind::Helper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Ready,
    Running,
    Yielded,
    BlockedRecv,
    BlockedIo,
    Done,
}

impl TaskState {
    pub fn code(self) -> u8 {
        match self {
            TaskState::Ready => 0,
            TaskState::Running => 1,
            TaskState::Yielded => 2,
            TaskState::BlockedRecv => 3,
            TaskState::BlockedIo => 4,
            TaskState::Done => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TaskState::Ready,
            1 => TaskState::Running,
            2 => TaskState::Yielded,
            3 => TaskState::BlockedRecv,
            4 => TaskState::BlockedIo,
            5 => TaskState::Done,
            _ => return None,
        })
    }
}

/// Values exchanged over scheduler channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Token(u64),
    /// Post-processing work for a helper: `compute` holds the lane, `io`
    /// holds it too unless I/O yield points are enabled.
    Job {
        compute: Ticks,
        io: Ticks,
    },
    Shutdown,
}

/// What a task asks of the scheduler when it gives control back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Compute(u64),
    Io(Ticks),
    Yield,
    Recv(ChannelId),
    /// Blocked on a message known to arrive after the given delay.
    WaitFor(Ticks),
    WaitUntil(Ticks),
    Done,
}

pub struct TaskContext<'a> {
    now: Ticks,
    task: TaskId,
    lane: usize,
    received: Option<Signal>,
    outbox: &'a mut Vec<(ChannelId, Signal)>,
}

impl TaskContext<'_> {
    pub fn now(&self) -> Ticks {
        self.now
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn lane(&self) -> usize {
        self.lane
    }

    /// The value delivered by the last completed `Recv`.
    pub fn take_received(&mut self) -> Option<Signal> {
        self.received.take()
    }

    pub fn send(&mut self, chan: ChannelId, sig: Signal) {
        self.outbox.push((chan, sig));
    }
}

pub trait TaskBody {
    fn resume(&mut self, cx: &mut TaskContext<'_>) -> Action;
}

/// A straight-line work descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Compute(u64),
    Io(Ticks),
    Yield,
    Recv(ChannelId),
    WaitFor(Ticks),
    Send(ChannelId, Signal),
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    steps: VecDeque<Step>,
}

impl Program {
    pub fn new(steps: impl IntoIterator<Item = Step>) -> Self {
        Program {
            steps: steps.into_iter().collect(),
        }
    }
}

impl TaskBody for Program {
    fn resume(&mut self, cx: &mut TaskContext<'_>) -> Action {
        cx.take_received();
        while let Some(step) = self.steps.pop_front() {
            match step {
                Step::Send(ch, sig) => cx.send(ch, sig),
                Step::Compute(n) => return Action::Compute(n),
                Step::Io(t) => return Action::Io(t),
                Step::Yield => return Action::Yield,
                Step::Recv(ch) => return Action::Recv(ch),
                Step::WaitFor(t) => return Action::WaitFor(t),
            }
        }
        Action::Done
    }
}

/// Drains post-processing jobs from a queue channel until `Shutdown`.
#[derive(Debug, Clone)]
pub struct HelperBody {
    queue: ChannelId,
    pending_io: Option<Ticks>,
    jobs_done: u64,
}

impl HelperBody {
    pub fn new(queue: ChannelId) -> Self {
        HelperBody {
            queue,
            pending_io: None,
            jobs_done: 0,
        }
    }
}

impl TaskBody for HelperBody {
    fn resume(&mut self, cx: &mut TaskContext<'_>) -> Action {
        if let Some(io) = self.pending_io.take() {
            self.jobs_done += 1;
            if io > 0 {
                return Action::Io(io);
            }
        }
        match cx.take_received() {
            Some(Signal::Job { compute, io }) => {
                self.pending_io = Some(io);
                if compute > 0 {
                    return Action::Compute(compute);
                }
                self.resume(cx)
            }
            Some(Signal::Shutdown) => Action::Done,
            _ => Action::Recv(self.queue),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedOptions {
    /// Turn blocking I/O into yield points.
    pub io_yield: bool,
    /// Charge process-level context switches instead of user-level ones.
    pub process_mode: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("unknown lane {0}")]
    UnknownLane(usize),
    #[error("deadlock: every remaining task is blocked: {}", dump_blocked(.0))]
    Deadlock(Vec<BlockedTask>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedTask {
    pub task: TaskId,
    pub state: TaskState,
    pub waiting_on: Option<ChannelId>,
}

fn dump_blocked(b: &[BlockedTask]) -> String {
    b.iter()
        .map(|t| format!("task {} {:?} on {:?}", t.task.0, t.state, t.waiting_on))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: Ticks,
    pub process: usize,
    pub lane: usize,
    pub task: TaskId,
    pub event: &'static str,
}

/// Renders scheduling events as `tick,process,lane,task,event` lines.
pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from("tick,process,lane,task,event\n");
    for e in events {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.tick, e.process, e.lane, e.task.0, e.event
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub finish: BTreeMap<TaskId, Ticks>,
    pub switches: u64,
    /// Per lane: ticks spent executing task work (compute and lane-holding I/O).
    pub busy: Vec<Ticks>,
    /// Per lane: the lane clock once everything finished.
    pub lane_end: Vec<Ticks>,
    pub trace: Vec<TraceEvent>,
}

struct Slot {
    kind: TaskKind,
    lane: usize,
    state: TaskState,
    body: Box<dyn TaskBody>,
    finish: Option<Ticks>,
    waiting_on: Option<ChannelId>,
    received: Option<Signal>,
}

#[derive(Default)]
struct Lane {
    clock: Ticks,
    queue: VecDeque<TaskId>,
    running: Option<TaskId>,
    last_release: Option<Ticks>,
    busy: Ticks,
}

pub struct Scheduler {
    process: usize,
    cost: CostModel,
    opts: SchedOptions,
    lanes: Vec<Lane>,
    tasks: Vec<Slot>,
    channels: BTreeMap<ChannelId, VecDeque<Signal>>,
    waiters: BTreeMap<ChannelId, VecDeque<TaskId>>,
    timers: BTreeSet<(Ticks, u64, TaskId)>,
    timer_seq: u64,
    switches: u64,
    trace: Vec<TraceEvent>,
}

impl Scheduler {
    pub fn new(process: usize, n_lanes: usize, cost: CostModel, opts: SchedOptions) -> Self {
        Scheduler {
            process,
            cost,
            opts,
            lanes: (0..n_lanes).map(|_| Lane::default()).collect(),
            tasks: Vec::new(),
            channels: BTreeMap::new(),
            waiters: BTreeMap::new(),
            timers: BTreeSet::new(),
            timer_seq: 0,
            switches: 0,
            trace: Vec::new(),
        }
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn spawn(
        &mut self,
        lane: usize,
        kind: TaskKind,
        body: impl TaskBody + 'static,
    ) -> Result<TaskId, SchedError> {
        if lane >= self.lanes.len() {
            return Err(SchedError::UnknownLane(lane));
        }
        let id = TaskId(self.tasks.len());
        self.tasks.push(Slot {
            kind,
            lane,
            state: TaskState::Ready,
            body: Box::new(body),
            finish: None,
            waiting_on: None,
            received: None,
        });
        self.lanes[lane].queue.push_back(id);
        Ok(id)
    }

    pub fn run_queue(&self, lane: usize) -> Vec<TaskId> {
        self.lanes[lane].queue.iter().copied().collect()
    }

    pub fn task_kind(&self, t: TaskId) -> TaskKind {
        self.tasks[t.0].kind
    }

    pub fn task_state(&self, t: TaskId) -> TaskState {
        self.tasks[t.0].state
    }

    fn switch_cost(&self) -> Ticks {
        if self.opts.process_mode {
            self.cost.process_ctx_switch()
        } else {
            self.cost.ctx_switch
        }
    }

    fn log(&mut self, tick: Ticks, lane: usize, task: TaskId, event: &'static str) {
        self.trace.push(TraceEvent {
            tick,
            process: self.process,
            lane,
            task,
            event,
        });
    }

    fn make_ready(&mut self, t: TaskId, at: Ticks) {
        let lane = self.tasks[t.0].lane;
        self.tasks[t.0].state = TaskState::Ready;
        self.tasks[t.0].waiting_on = None;
        let l = &mut self.lanes[lane];
        if l.running.is_none() && l.queue.is_empty() && l.clock < at {
            l.clock = at;
        }
        l.queue.push_back(t);
        self.log(at, lane, t, "wake");
    }

    fn add_timer(&mut self, at: Ticks, t: TaskId) {
        self.timer_seq += 1;
        self.timers.insert((at, self.timer_seq, t));
    }

    fn release(&mut self, lane: usize) {
        let l = &mut self.lanes[lane];
        l.running = None;
        l.last_release = Some(l.clock);
    }

    fn deliver(&mut self, now: Ticks, chan: ChannelId, sig: Signal) {
        if let Some(t) = self.waiters.get_mut(&chan).and_then(VecDeque::pop_front) {
            self.tasks[t.0].received = Some(sig);
            self.make_ready(t, now);
        } else {
            self.channels.entry(chan).or_default().push_back(sig);
        }
    }

    /// Runs every task to completion and reports per-task finish times.
    pub fn run_to_completion(mut self) -> Result<RunReport, SchedError> {
        loop {
            let next_lane = self
                .lanes
                .iter()
                .enumerate()
                .filter(|(_, l)| l.running.is_some() || !l.queue.is_empty())
                .min_by_key(|(i, l)| (l.clock, *i))
                .map(|(i, l)| (l.clock, i));
            let next_timer = self.timers.first().copied();

            // timers fire before lanes at the same tick
            match (next_timer, next_lane) {
                (Some((t, seq, task)), lane) if lane.is_none_or(|(c, _)| t <= c) => {
                    self.timers.remove(&(t, seq, task));
                    self.make_ready(task, t);
                }
                (_, Some((_, lane))) => self.step_lane(lane),
                _ => break,
            }
        }

        let blocked: Vec<BlockedTask> = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, s)| s.state != TaskState::Done)
            .map(|(i, s)| BlockedTask {
                task: TaskId(i),
                state: s.state,
                waiting_on: s.waiting_on,
            })
            .collect();
        if !blocked.is_empty() {
            return Err(SchedError::Deadlock(blocked));
        }
        Ok(RunReport {
            finish: self
                .tasks
                .iter()
                .enumerate()
                .map(|(i, s)| (TaskId(i), s.finish.unwrap_or(0)))
                .collect(),
            switches: self.switches,
            busy: self.lanes.iter().map(|l| l.busy).collect(),
            lane_end: self.lanes.iter().map(|l| l.clock).collect(),
            trace: self.trace,
        })
    }

    fn step_lane(&mut self, lane: usize) {
        let task = match self.lanes[lane].running {
            Some(t) => t,
            None => {
                let t = self.lanes[lane]
                    .queue
                    .pop_front()
                    .expect("lane has ready work");
                let l = &self.lanes[lane];
                if l.last_release == Some(l.clock) {
                    let cost = self.switch_cost();
                    self.switches += 1;
                    let at = self.lanes[lane].clock;
                    self.log(at, lane, t, "switch");
                    self.lanes[lane].clock += cost;
                }
                self.lanes[lane].running = Some(t);
                self.tasks[t.0].state = TaskState::Running;
                let at = self.lanes[lane].clock;
                self.log(at, lane, t, "dispatch");
                t
            }
        };

        let now = self.lanes[lane].clock;
        let mut outbox = Vec::new();
        let action = {
            let slot = &mut self.tasks[task.0];
            let mut cx = TaskContext {
                now,
                task,
                lane,
                received: slot.received.take(),
                outbox: &mut outbox,
            };
            slot.body.resume(&mut cx)
        };
        for (ch, sig) in outbox {
            self.deliver(now, ch, sig);
        }

        match action {
            Action::Compute(units) => {
                let cost = units * self.cost.compute_tick;
                self.log(now, lane, task, "compute");
                let l = &mut self.lanes[lane];
                l.clock += cost;
                l.busy += cost;
            }
            Action::Io(ticks) if self.opts.io_yield && ticks > 0 => {
                self.log(now, lane, task, "block_io");
                self.tasks[task.0].state = TaskState::BlockedIo;
                self.add_timer(now + ticks, task);
                self.release(lane);
            }
            Action::Io(ticks) => {
                self.log(now, lane, task, "io");
                let l = &mut self.lanes[lane];
                l.clock += ticks;
                l.busy += ticks;
            }
            Action::Yield => {
                self.log(now, lane, task, "yield");
                self.tasks[task.0].state = TaskState::Yielded;
                self.release(lane);
                self.tasks[task.0].state = TaskState::Ready;
                self.lanes[lane].queue.push_back(task);
            }
            Action::Recv(ch) => {
                if let Some(sig) = self.channels.get_mut(&ch).and_then(VecDeque::pop_front) {
                    self.tasks[task.0].received = Some(sig);
                } else {
                    self.log(now, lane, task, "block_recv");
                    let slot = &mut self.tasks[task.0];
                    slot.state = TaskState::BlockedRecv;
                    slot.waiting_on = Some(ch);
                    self.waiters.entry(ch).or_default().push_back(task);
                    self.release(lane);
                }
            }
            Action::WaitFor(d) => {
                if d > 0 {
                    self.log(now, lane, task, "block_recv");
                    self.tasks[task.0].state = TaskState::BlockedRecv;
                    self.add_timer(now + d, task);
                    self.release(lane);
                }
            }
            Action::WaitUntil(t) => {
                if t > now {
                    self.log(now, lane, task, "block_recv");
                    self.tasks[task.0].state = TaskState::BlockedRecv;
                    self.add_timer(t, task);
                    self.release(lane);
                }
            }
            Action::Done => {
                self.log(now, lane, task, "done");
                let slot = &mut self.tasks[task.0];
                slot.state = TaskState::Done;
                slot.finish = Some(now);
                self.release(lane);
            }
        }
    }
}

/// Post-processing work queued to a helper that shares a lane with one
/// application task. This is the per-lane special case of [`Scheduler`]
/// used by the message-passing runtime, where the application's blocking
/// points come from message arrival times.
#[derive(Debug, Clone)]
pub struct HelperLane {
    io_yield: bool,
    ctx_switch: Ticks,
    max_depth: usize,
    queue: VecDeque<(Ticks, Ticks)>,
    /// The helper cannot start new work before this tick (pending async I/O).
    helper_ready_at: Ticks,
    last_done: Ticks,
    jobs_done: u64,
    helper_ticks: Ticks,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("helper queue full ({depth} pending jobs)")]
pub struct Backlog {
    pub depth: usize,
}

impl HelperLane {
    pub fn new(io_yield: bool, ctx_switch: Ticks, max_depth: usize) -> Self {
        HelperLane {
            io_yield,
            ctx_switch,
            max_depth,
            queue: VecDeque::new(),
            helper_ready_at: 0,
            last_done: 0,
            jobs_done: 0,
            helper_ticks: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn jobs_done(&self) -> u64 {
        self.jobs_done
    }

    /// Completion tick of the most recent finished job.
    pub fn last_done(&self) -> Ticks {
        self.last_done
    }

    /// Total helper work executed so far.
    pub fn helper_ticks(&self) -> Ticks {
        self.helper_ticks
    }

    pub fn enqueue(&mut self, compute: Ticks, io: Ticks) -> Result<(), Backlog> {
        if self.queue.len() >= self.max_depth {
            return Err(Backlog {
                depth: self.queue.len(),
            });
        }
        self.queue.push_back((compute, io));
        Ok(())
    }

    /// The application blocks at `block_at` on an event that fires at
    /// `ready_at`. Runs queued helper work in the window and returns the tick
    /// at which the application resumes.
    pub fn on_app_block(&mut self, block_at: Ticks, ready_at: Ticks) -> Ticks {
        if ready_at <= block_at || self.queue.is_empty() || self.helper_ready_at >= ready_at {
            return ready_at.max(block_at);
        }
        let mut t = block_at;
        if self.helper_ready_at > t {
            // lane idles until the helper's I/O completes; no handoff charge
            t = self.helper_ready_at;
        } else {
            t += self.ctx_switch;
        }
        while let Some(&(compute, io)) = self.queue.front() {
            self.queue.pop_front();
            t += compute;
            self.helper_ticks += compute + io;
            self.jobs_done += 1;
            if self.io_yield {
                let io_done = t + io;
                self.last_done = io_done;
                self.helper_ready_at = io_done;
                if io_done >= ready_at || self.queue.is_empty() {
                    break;
                }
                t = io_done;
            } else {
                t += io;
                self.last_done = t;
                self.helper_ready_at = t;
                if t >= ready_at {
                    break;
                }
            }
        }
        if t >= ready_at {
            t + self.ctx_switch
        } else {
            ready_at
        }
    }

    /// Runs whatever is left once the application is done at `app_end`.
    /// Returns the tick at which the helper finishes.
    pub fn drain(&mut self, app_end: Ticks) -> Ticks {
        if self.queue.is_empty() {
            return self.last_done.max(self.helper_ready_at);
        }
        let mut t = app_end.max(self.helper_ready_at) + self.ctx_switch;
        while let Some((compute, io)) = self.queue.pop_front() {
            t += compute + io;
            self.helper_ticks += compute + io;
            self.jobs_done += 1;
        }
        self.last_done = t;
        self.helper_ready_at = t;
        t
    }
}
