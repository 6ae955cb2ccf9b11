use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use crate::ckpt::CkptState;
use crate::config::{DriverKind, JobSpec, NetConfig, RailSpec, Topology};
use crate::kvs::{InProcKvs, KvsClient, TcpKvsClient, TcpKvsServer};
use crate::sched::{CostModel, HelperLane, TaskKind, TaskState, Ticks, VirtualClock};

use super::{
    elect_endpoint, Election, Endpoint, EndpointState, EndpointTable, Frame, FrameType, Message,
    NetError, ProcessId, RailId, RouteOrigin, TaskRank,
};

/// Reserved tags below this value belong to the runtime itself.
pub(crate) const TAG_COLLECTIVE: i64 = -1000;

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// When false, collective checkpoints return `Ignore`.
    pub checkpointing: bool,
    /// Virtual ticks a requester waits for a connection acknowledgement.
    pub connect_timeout: Ticks,
    pub job_id: String,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            checkpointing: true,
            connect_timeout: 10_000,
            job_id: "job".to_string(),
        }
    }
}

/// Opaque queue-pair token. Deliberately neither `Clone` nor serializable:
/// it only exists while the owning rail is open.
#[derive(Debug, PartialEq, Eq)]
pub struct QpToken(u64);

#[derive(Debug, Default)]
pub struct MockRdmaState {
    pub pinned_regions: BTreeSet<u64>,
    pub qp_tokens: Vec<QpToken>,
}

impl MockRdmaState {
    pub fn is_empty(&self) -> bool {
        self.pinned_regions.is_empty() && self.qp_tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TaskSlot {
    pub rank: TaskRank,
    pub kind: TaskKind,
    pub state: TaskState,
    pub clock: VirtualClock,
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub wire: Vec<u8>,
    pub src_task: TaskRank,
    pub tag: i64,
    pub arrival: Ticks,
    /// `None` for intra-process delivery, which bypasses the rails.
    pub rail: Option<RailId>,
}

/// Runtime events, kept in order for inspection by tests and reports.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    EndpointCreated {
        process: ProcessId,
        rail: String,
        remote: ProcessId,
        origin: RouteOrigin,
    },
    OnDemandConnect {
        from: ProcessId,
        to: ProcessId,
        rail: String,
    },
    RailClosed {
        rail: String,
        removed: usize,
    },
    RailReopened {
        rail: String,
    },
    ProcessKilled {
        process: ProcessId,
    },
    CkptArrive {
        epoch: u64,
        process: ProcessId,
        task: TaskRank,
    },
    CkptMaster {
        epoch: u64,
        process: ProcessId,
        task: TaskRank,
    },
    BarrierToken {
        epoch: u64,
        release: bool,
        from: ProcessId,
        to: ProcessId,
    },
    QuiescenceFailed {
        epoch: u64,
        detail: String,
    },
    ImageWritten {
        epoch: u64,
        process: ProcessId,
        task: TaskRank,
        path: PathBuf,
    },
    ManifestWritten {
        epoch: u64,
        path: PathBuf,
    },
    CkptReturn {
        epoch: u64,
        task: TaskRank,
        state: CkptState,
    },
}

/// Injected misbehaviour for fault-tolerance tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// The target of the next connection request on this rail closes the rail
    /// before answering.
    CloseRailOnConnRequest { rail: String },
}

/// Delivery receipt for [`Runtime::send`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub rail: Option<String>,
    pub arrival: Ticks,
    pub sent_at: Ticks,
    pub connected_on_demand: bool,
}

pub(crate) struct ProcessState {
    pub(crate) alive: bool,
    pub(crate) table: EndpointTable,
    pub(crate) rail_open: Vec<bool>,
    pub(crate) tasks: Vec<TaskSlot>,
    pub(crate) mailboxes: BTreeMap<TaskRank, VecDeque<Envelope>>,
    pub(crate) sent_to: Vec<u64>,
    pub(crate) recv_from: Vec<u64>,
    pub(crate) rdma: BTreeMap<RailId, MockRdmaState>,
    pub(crate) helper: Option<HelperLane>,
}

/// A job of logical processes connected by rails, driven in virtual time.
pub struct Runtime {
    pub(crate) job: JobSpec,
    pub(crate) net: NetConfig,
    pub(crate) opts: RuntimeOptions,
    pub(crate) rails: Vec<RailSpec>,
    pub(crate) rail_open: Vec<bool>,
    pub(crate) procs: Vec<ProcessState>,
    pub(crate) unacked: Vec<u64>,
    pub(crate) next_seq: u64,
    pub(crate) on_demand_connects: u64,
    pub(crate) messages_sent: u64,
    pub(crate) events: Vec<Event>,
    pub(crate) faults: Vec<Fault>,
    pub(crate) epoch: u64,
    tcp_kvs: Option<TcpKvsServer>,
}

impl Runtime {
    /// Creates the processes and bootstraps every ring rail through the KVS.
    pub fn start(job: JobSpec, net: NetConfig, opts: RuntimeOptions) -> Result<Self, crate::Error> {
        job.validate()?;
        let rails = net.option_rails(&job.net_option)?;
        let n = job.n_processes;
        let tpp = job.tasks_per_process;
        let procs = (0..n)
            .map(|p| ProcessState {
                alive: true,
                table: EndpointTable::new(),
                rail_open: vec![true; rails.len()],
                tasks: (0..tpp)
                    .map(|i| TaskSlot {
                        rank: p * tpp + i,
                        kind: TaskKind::App,
                        state: TaskState::Ready,
                        clock: VirtualClock::default(),
                    })
                    .collect(),
                mailboxes: BTreeMap::new(),
                sent_to: vec![0; n],
                recv_from: vec![0; n],
                rdma: BTreeMap::new(),
                helper: None,
            })
            .collect();
        let mut rt = Runtime {
            job,
            net,
            opts,
            rail_open: vec![true; rails.len()],
            unacked: vec![0; rails.len()],
            rails,
            procs,
            next_seq: 0,
            on_demand_connects: 0,
            messages_sent: 0,
            events: Vec::new(),
            faults: Vec::new(),
            epoch: 0,
            tcp_kvs: None,
        };
        for r in 0..rt.rails.len() {
            if rt.rails[r].topology != Topology::None {
                rt.bootstrap_rail(RailId(r))?;
            }
        }
        Ok(rt)
    }

    pub fn job(&self) -> &JobSpec {
        &self.job
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn cost(&self) -> &CostModel {
        &self.job.cost_model
    }

    pub fn n_processes(&self) -> usize {
        self.procs.len()
    }

    pub fn n_app_tasks(&self) -> usize {
        self.job.n_tasks()
    }

    pub fn rails(&self) -> &[RailSpec] {
        &self.rails
    }

    pub fn rail_id(&self, name: &str) -> Result<RailId, NetError> {
        self.rails
            .iter()
            .position(|r| r.name == name)
            .map(RailId)
            .ok_or_else(|| NetError::UnknownRail(name.to_string()))
    }

    pub fn rail_is_open(&self, name: &str) -> Result<bool, NetError> {
        Ok(self.rail_open[self.rail_id(name)?.0])
    }

    pub fn job_id(&self) -> &str {
        &self.opts.job_id
    }

    /// Directory holding this job's checkpoints.
    pub fn ckpt_root(&self) -> PathBuf {
        self.job.ckpt_dir.join(&self.opts.job_id)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn clear_events(&mut self) {
        self.events.clear();
    }

    pub fn inject(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    pub fn on_demand_connects(&self) -> u64 {
        self.on_demand_connects
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn process_of(&self, rank: TaskRank) -> Result<ProcessId, NetError> {
        if rank < self.n_app_tasks() {
            Ok(rank / self.job.tasks_per_process)
        } else {
            self.procs
                .iter()
                .position(|p| p.tasks.iter().any(|t| t.rank == rank))
                .ok_or(NetError::UnknownTask(rank))
        }
    }

    pub(crate) fn slot_index(&self, rank: TaskRank) -> Result<(ProcessId, usize), NetError> {
        let p = self.process_of(rank)?;
        let i = self.procs[p]
            .tasks
            .iter()
            .position(|t| t.rank == rank)
            .ok_or(NetError::UnknownTask(rank))?;
        Ok((p, i))
    }

    pub fn task(&self, rank: TaskRank) -> Result<&TaskSlot, NetError> {
        let (p, i) = self.slot_index(rank)?;
        Ok(&self.procs[p].tasks[i])
    }

    pub fn tasks_of(&self, p: ProcessId) -> &[TaskSlot] {
        &self.procs[p].tasks
    }

    pub fn clock(&self, rank: TaskRank) -> Result<Ticks, NetError> {
        Ok(self.task(rank)?.clock.now())
    }

    /// Charges `ticks` of virtual time to a task.
    pub fn advance(&mut self, rank: TaskRank, ticks: Ticks) -> Result<Ticks, NetError> {
        let (p, i) = self.slot_index(rank)?;
        Ok(self.procs[p].tasks[i].clock.advance(ticks))
    }

    pub fn compute(&mut self, rank: TaskRank, units: u64) -> Result<Ticks, NetError> {
        let cost = units * self.job.cost_model.compute_tick;
        self.advance(rank, cost)
    }

    /// Largest task clock in the job.
    pub fn walltime(&self) -> Ticks {
        self.procs
            .iter()
            .flat_map(|p| p.tasks.iter())
            .map(|t| t.clock.now())
            .max()
            .unwrap_or(0)
    }

    pub fn table(&self, p: ProcessId) -> &EndpointTable {
        &self.procs[p].table
    }

    pub fn rdma_state(&self, p: ProcessId, rail: &str) -> Option<&MockRdmaState> {
        let id = self.rail_id(rail).ok()?;
        self.procs[p].rdma.get(&id)
    }

    pub fn is_alive(&self, p: ProcessId) -> bool {
        self.procs.get(p).is_some_and(|s| s.alive)
    }

    pub fn kill(&mut self, p: ProcessId) {
        if let Some(s) = self.procs.get_mut(p) {
            s.alive = false;
            self.events.push(Event::ProcessKilled { process: p });
        }
    }

    /// Adds a helper task to a process, oversubscribed on the lane of its
    /// first application task. Returns the helper's rank.
    pub fn attach_helper(&mut self, p: ProcessId, lane: HelperLane) -> TaskRank {
        let rank = self.n_app_tasks() + p;
        let clock = self.procs[p].tasks[0].clock;
        let ps = &mut self.procs[p];
        if !ps.tasks.iter().any(|t| t.rank == rank) {
            ps.tasks.push(TaskSlot {
                rank,
                kind: TaskKind::Helper,
                state: TaskState::BlockedRecv,
                clock,
            });
        }
        ps.helper = Some(lane);
        rank
    }

    pub fn helper_mut(&mut self, p: ProcessId) -> Option<&mut HelperLane> {
        self.procs[p].helper.as_mut()
    }

    pub fn helper(&self, p: ProcessId) -> Option<&HelperLane> {
        self.procs[p].helper.as_ref()
    }

    fn conn_info(&mut self, p: ProcessId, rail: RailId) -> String {
        match self.rails[rail.0].driver {
            DriverKind::Tcp => format!("127.0.0.1:{}", 45000 + p),
            DriverKind::Inproc => format!("shm:{p}"),
            DriverKind::MockRdma => {
                self.next_seq += 1;
                format!("rdma:lid={p}:qpn={}", self.next_seq)
            }
        }
    }

    fn kvs_key(&self, rail: RailId, p: ProcessId) -> String {
        format!("rail.{}.rank.{p}", self.rails[rail.0].name)
    }

    fn bootstrap_peers(&self, rail: RailId, p: ProcessId) -> Vec<ProcessId> {
        let n = self.procs.len();
        let peers: BTreeSet<ProcessId> = match self.rails[rail.0].topology {
            Topology::Ring if n > 1 => [(p + n - 1) % n, (p + 1) % n].into_iter().collect(),
            Topology::Full => (0..n).filter(|&q| q != p).collect(),
            _ => BTreeSet::new(),
        };
        peers.into_iter().filter(|&q| q != p).collect()
    }

    /// Wires the static routes of a rail. Every process publishes its
    /// connection info, fences, then reads its neighbours' entries.
    pub(crate) fn bootstrap_rail(&mut self, rail: RailId) -> Result<(), NetError> {
        let n = self.procs.len();
        let infos: Vec<String> = (0..n).map(|p| self.conn_info(p, rail)).collect();
        let keys: Vec<String> = (0..n).map(|p| self.kvs_key(rail, p)).collect();
        let peers: Vec<Vec<ProcessId>> = (0..n).map(|p| self.bootstrap_peers(rail, p)).collect();

        let lookups: Vec<Vec<(ProcessId, String)>> = if self.rails[rail.0].driver == DriverKind::Tcp
        {
            if self.tcp_kvs.is_none() {
                let server =
                    TcpKvsServer::start(n).map_err(|e| NetError::Bootstrap(e.to_string()))?;
                self.tcp_kvs = Some(server);
            }
            let addr = self.tcp_kvs.as_ref().unwrap().addr();
            exchange(n, &keys, &infos, &peers, || {
                TcpKvsClient::connect(addr).map_err(|e| NetError::Bootstrap(e.to_string()))
            })?
        } else {
            let kvs = InProcKvs::new(n);
            exchange(n, &keys, &infos, &peers, || Ok(kvs.clone()))?
        };

        for (p, found) in lookups.into_iter().enumerate() {
            for (q, info) in found {
                self.add_endpoint(p, rail, q, RouteOrigin::Static, info);
            }
        }
        Ok(())
    }

    pub(crate) fn add_endpoint(
        &mut self,
        p: ProcessId,
        rail: RailId,
        remote: ProcessId,
        origin: RouteOrigin,
        conn_info: String,
    ) -> bool {
        self.next_seq += 1;
        let ep = Endpoint {
            rail,
            priority: self.rails[rail.0].priority,
            remote,
            state: EndpointState::Connected,
            origin,
            conn_info,
            seq: self.next_seq,
        };
        let inserted = self.procs[p].table.insert(ep);
        if inserted {
            if self.rails[rail.0].driver == DriverKind::MockRdma {
                let token = QpToken(self.next_seq);
                self.procs[p]
                    .rdma
                    .entry(rail)
                    .or_default()
                    .qp_tokens
                    .push(token);
            }
            self.events.push(Event::EndpointCreated {
                process: p,
                rail: self.rails[rail.0].name.clone(),
                remote,
                origin,
            });
        }
        inserted
    }

    /// Sends `payload` from one task to another. Returns once the message is
    /// queued at the destination; the sender's clock is charged for transit.
    pub fn send(
        &mut self,
        src: TaskRank,
        dst: TaskRank,
        tag: i64,
        payload: Vec<u8>,
    ) -> Result<Receipt, NetError> {
        let (sp, si) = self.slot_index(src)?;
        let dp = self.process_of(dst)?;
        if !self.procs[sp].alive {
            return Err(NetError::PeerFailed(sp));
        }
        if !self.procs[dp].alive {
            return Err(NetError::PeerFailed(dp));
        }
        let msg = Message {
            src_task: src,
            dst_task: dst,
            src_process: sp,
            dst_process: dp,
            tag,
            payload,
        };
        let sent_at = self.procs[sp].tasks[si].clock.now();
        let cost = self.job.cost_model.clone();

        let (rail, connected_on_demand) = if sp == dp {
            (None, false)
        } else {
            match elect_endpoint(
                &self.procs[sp].table,
                &msg,
                &self.rails,
                &self.procs[sp].rail_open,
            )? {
                Election::Existing(ep) => (Some(ep.rail), false),
                Election::Create(r) => {
                    let (_, ticks) = self.connect(sp, dp, r).map_err(|e| {
                        if let NetError::ConnectTimeout { .. } = e {
                            self.procs[sp].tasks[si]
                                .clock
                                .advance(self.opts.connect_timeout);
                        }
                        e
                    })?;
                    self.procs[sp].tasks[si].clock.advance(ticks);
                    (Some(r), true)
                }
            }
        };

        let frame = Frame {
            frame_type: FrameType::Data,
            src_process: sp as u64,
            dst_process: dp as u64,
            src_task: src as u64,
            dst_task: dst as u64,
            tag,
            payload: msg.payload,
        };
        let wire = frame.encode();
        let transit = match rail {
            Some(r) => {
                self.rails[r.0].driver.latency() + cost.net_per_byte * frame.payload.len() as u64
            }
            None => cost.ctx_switch,
        };
        let arrival = self.procs[sp].tasks[si].clock.advance(transit);

        if let Some(r) = rail {
            self.unacked[r.0] += 1;
            if self.rails[r.0].driver == DriverKind::MockRdma {
                self.next_seq += 1;
                let region = self.next_seq;
                self.procs[sp]
                    .rdma
                    .entry(r)
                    .or_default()
                    .pinned_regions
                    .insert(region);
            }
        }
        self.procs[sp].sent_to[dp] += 1;
        self.messages_sent += 1;
        self.procs[dp]
            .mailboxes
            .entry(dst)
            .or_default()
            .push_back(Envelope {
                wire,
                src_task: src,
                tag,
                arrival,
                rail,
            });
        Ok(Receipt {
            rail: rail.map(|r| self.rails[r.0].name.clone()),
            arrival,
            sent_at,
            connected_on_demand,
        })
    }

    /// Takes the oldest queued message for `task` matching the filters. The
    /// task's clock moves to the arrival time if the message is still in
    /// transit; a helper sharing the lane may run in that window.
    pub fn recv(
        &mut self,
        task: TaskRank,
        src: Option<TaskRank>,
        tag: Option<i64>,
    ) -> Result<Message, NetError> {
        let (p, i) = self.slot_index(task)?;
        if !self.procs[p].alive {
            return Err(NetError::PeerFailed(p));
        }
        let mailbox = self.procs[p].mailboxes.entry(task).or_default();
        let pos = mailbox
            .iter()
            .position(|e| src.is_none_or(|s| s == e.src_task) && tag.is_none_or(|t| t == e.tag))
            .ok_or(NetError::NoMessage { task, src, tag })?;
        let env = mailbox.remove(pos).unwrap();
        let (frame, _) = Frame::decode(&env.wire)?;
        if let Some(r) = env.rail {
            self.unacked[r.0] = self.unacked[r.0].saturating_sub(1);
            if self.rails[r.0].driver == DriverKind::MockRdma {
                // the sender's registration is released once the data lands
                let sp = frame.src_process as usize;
                if let Some(state) = self.procs[sp].rdma.get_mut(&r) {
                    state.pinned_regions.pop_first();
                }
            }
        }
        let sp = frame.src_process as usize;
        self.procs[p].recv_from[sp] += 1;

        let block_at = self.procs[p].tasks[i].clock.now();
        let resume = if i == 0 && env.arrival > block_at {
            match self.procs[p].helper.as_mut() {
                Some(h) => h.on_app_block(block_at, env.arrival),
                None => env.arrival,
            }
        } else {
            env.arrival
        };
        self.procs[p].tasks[i].clock.advance_to(resume);

        Ok(Message {
            src_task: frame.src_task as usize,
            dst_task: frame.dst_task as usize,
            src_process: sp,
            dst_process: frame.dst_process as usize,
            tag: frame.tag,
            payload: frame.payload,
        })
    }

    /// Number of messages queued for a task and not yet received.
    pub fn pending(&self, task: TaskRank) -> usize {
        self.process_of(task)
            .ok()
            .and_then(|p| self.procs[p].mailboxes.get(&task))
            .map_or(0, VecDeque::len)
    }

    /// Frames sent on a rail and not yet matched by a receive.
    pub fn in_flight(&self, rail: &str) -> Result<u64, NetError> {
        Ok(self.unacked[self.rail_id(rail)?.0])
    }

    /// Establishes a route between two processes over `rail` via routed
    /// control messages. Returns the endpoint held by `from` and the virtual
    /// ticks the exchange took.
    pub fn on_demand_connect(
        &mut self,
        rail: &str,
        from: ProcessId,
        to: ProcessId,
    ) -> Result<(Endpoint, Ticks), NetError> {
        let r = self.rail_id(rail)?;
        self.connect(from, to, r)
    }

    fn connect(
        &mut self,
        from: ProcessId,
        to: ProcessId,
        rail: RailId,
    ) -> Result<(Endpoint, Ticks), NetError> {
        let ticks = self.request_connection(from, to, rail)?;
        let ep = self.procs[from]
            .table
            .get(to, rail)
            .cloned()
            .expect("connection established on both sides");
        Ok((ep, ticks))
    }

    /// Called by the signaling layer once a request reached its target.
    pub(crate) fn accept_connection(
        &mut self,
        at: ProcessId,
        from: ProcessId,
        rail: RailId,
    ) -> Result<String, NetError> {
        let name = self.rails[rail.0].name.clone();
        if let Some(pos) = self
            .faults
            .iter()
            .position(|f| matches!(f, Fault::CloseRailOnConnRequest { rail } if *rail == name))
        {
            self.faults.remove(pos);
            self.close_rail_at(at, rail);
        }
        if !self.procs[at].alive || !self.procs[at].rail_open[rail.0] {
            return Err(NetError::ConnectTimeout { to: at, rail: name });
        }
        let info = self.conn_info(at, rail);
        self.add_endpoint(at, rail, from, RouteOrigin::Dynamic, info.clone());
        Ok(info)
    }

    pub(crate) fn complete_connection(
        &mut self,
        at: ProcessId,
        to: ProcessId,
        rail: RailId,
        info: String,
    ) {
        if self.add_endpoint(at, rail, to, RouteOrigin::Dynamic, info) {
            self.on_demand_connects += 1;
            self.events.push(Event::OnDemandConnect {
                from: at,
                to,
                rail: self.rails[rail.0].name.clone(),
            });
        }
    }

    fn close_rail_at(&mut self, p: ProcessId, rail: RailId) -> usize {
        let ps = &mut self.procs[p];
        ps.rail_open[rail.0] = false;
        ps.rdma.remove(&rail);
        ps.table.remove_rail(rail)
    }

    /// Closes a rail on every process, releasing all of its endpoints and
    /// driver state. Fails if frames on the rail are still unmatched.
    pub fn close_rail(&mut self, name: &str) -> Result<usize, NetError> {
        let rail = self.rail_id(name)?;
        let in_flight = self.unacked[rail.0];
        if in_flight > 0 {
            return Err(NetError::RailBusy {
                rail: name.to_string(),
                in_flight,
            });
        }
        let removed = (0..self.procs.len())
            .map(|p| self.close_rail_at(p, rail))
            .sum();
        self.rail_open[rail.0] = false;
        self.events.push(Event::RailClosed {
            rail: name.to_string(),
            removed,
        });
        Ok(removed)
    }

    /// Makes a rail usable again. Ring and full rails get their static routes
    /// back from the KVS; everything else reconnects lazily on demand.
    pub fn reopen_rail(&mut self, name: &str) -> Result<(), NetError> {
        let rail = self.rail_id(name)?;
        if self.rail_open[rail.0] && self.procs.iter().all(|p| p.rail_open[rail.0]) {
            return Ok(());
        }
        self.rail_open[rail.0] = true;
        for p in &mut self.procs {
            p.rail_open[rail.0] = true;
        }
        if self.rails[rail.0].topology != Topology::None {
            self.bootstrap_rail(rail)?;
        }
        self.events.push(Event::RailReopened {
            rail: name.to_string(),
        });
        Ok(())
    }

    /// Dynamic routes (counted once per process pair) on non-checkpointable
    /// rails. These are the routes a checkpoint tears down.
    pub fn dynamic_route_census(&self) -> usize {
        let mut pairs = BTreeSet::new();
        for (p, ps) in self.procs.iter().enumerate() {
            for ep in ps.table.iter() {
                if ep.origin == RouteOrigin::Dynamic && !self.rails[ep.rail.0].checkpointable {
                    pairs.insert((ep.rail, p.min(ep.remote), p.max(ep.remote)));
                }
            }
        }
        pairs.len()
    }

    fn check_app_world(&self, world: &[TaskRank]) -> Result<(), NetError> {
        for &r in world {
            if self.task(r)?.kind != TaskKind::App {
                return Err(NetError::HelperInCollective(r));
            }
        }
        Ok(())
    }

    /// Max-allreduce over `world` using a pairwise tree in rank order followed
    /// by a broadcast. All members leave at the same virtual instant.
    pub fn allreduce_max(&mut self, world: &[TaskRank], values: &[f64]) -> Result<f64, NetError> {
        assert_eq!(world.len(), values.len());
        self.check_app_world(world)?;
        let mut acc: Vec<f64> = values.to_vec();
        let n = world.len();
        let mut stride = 1;
        while stride < n {
            let mut i = 0;
            while i + stride < n {
                let (dst, src) = (world[i], world[i + stride]);
                self.send(
                    src,
                    dst,
                    TAG_COLLECTIVE,
                    acc[i + stride].to_le_bytes().to_vec(),
                )?;
                let m = self.recv(dst, Some(src), Some(TAG_COLLECTIVE))?;
                let v = f64::from_le_bytes(m.payload[..8].try_into().unwrap());
                acc[i] = if v > acc[i] { v } else { acc[i] };
                i += 2 * stride;
            }
            stride *= 2;
        }
        let result = acc[0];
        while stride > 1 {
            stride /= 2;
            let mut i = 0;
            while i + stride < n {
                let (src, dst) = (world[i], world[i + stride]);
                self.send(src, dst, TAG_COLLECTIVE - 1, result.to_le_bytes().to_vec())?;
                self.recv(dst, Some(src), Some(TAG_COLLECTIVE - 1))?;
                i += 2 * stride;
            }
        }
        self.synchronize(world)?;
        Ok(result)
    }

    /// Moves every task in `world` to the latest clock among them.
    pub fn synchronize(&mut self, world: &[TaskRank]) -> Result<Ticks, NetError> {
        let mut t = 0;
        for &r in world {
            t = t.max(self.clock(r)?);
        }
        for &r in world {
            let (p, i) = self.slot_index(r)?;
            self.procs[p].tasks[i].clock.advance_to(t);
        }
        Ok(t)
    }
}

/// Runs the publish/fence/lookup exchange with one thread per process.
fn exchange<C, F>(
    n: usize,
    keys: &[String],
    infos: &[String],
    peers: &[Vec<ProcessId>],
    client: F,
) -> Result<Vec<Vec<(ProcessId, String)>>, NetError>
where
    C: KvsClient + Send,
    F: Fn() -> Result<C, NetError> + Sync,
{
    let clients: Vec<C> = (0..n).map(|_| client()).collect::<Result<_, _>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .into_iter()
            .enumerate()
            .map(|(p, mut c)| {
                s.spawn(move || -> Result<Vec<(ProcessId, String)>, NetError> {
                    let err = |e: crate::kvs::KvsError| NetError::Bootstrap(e.to_string());
                    c.put(&keys[p], &infos[p]).map_err(err)?;
                    c.fence().map_err(err)?;
                    peers[p]
                        .iter()
                        .map(|&q| Ok((q, c.get(&keys[q]).map_err(err)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bootstrap thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rt(np: usize, tpp: usize, option: &str) -> Runtime {
        Runtime::start(
            JobSpec::new(np, tpp, option),
            NetConfig::builtin(),
            RuntimeOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn ring_bootstrap_creates_static_neighbors() {
        let rt = rt(8, 1, "multirail_tcp");
        for p in 0..8 {
            let mut n = rt.table(p).neighbors(&rt.procs[p].rail_open);
            n.sort();
            let mut want = vec![(p + 7) % 8, (p + 1) % 8];
            want.sort();
            assert_eq!(n, want);
            assert!(rt.table(p).iter().all(|e| e.origin == RouteOrigin::Static));
        }
    }

    #[test]
    fn two_process_ring_has_one_endpoint_each() {
        let rt = rt(2, 1, "shm");
        assert_eq!(rt.table(0).len(), 1);
        assert_eq!(rt.table(1).len(), 1);
        let single = self::rt(1, 2, "shm");
        assert!(single.table(0).is_empty());
    }

    #[test]
    fn ping_pong_is_identity() {
        let mut rt = rt(2, 1, "multirail_tcp");
        let payload = b"8 bytes!".to_vec();
        rt.send(0, 1, 7, payload.clone()).unwrap();
        let m = rt.recv(1, Some(0), Some(7)).unwrap();
        assert_eq!(m.payload, payload);
        rt.send(1, 0, 7, m.payload).unwrap();
        assert_eq!(rt.recv(0, None, None).unwrap().payload, payload);
        assert_eq!(rt.in_flight("tcp_mpi").unwrap(), 0);
    }

    #[test]
    fn fifo_per_tag() {
        let mut rt = rt(3, 1, "shm");
        rt.send(0, 1, 1, vec![1]).unwrap();
        rt.send(0, 1, 2, vec![9]).unwrap();
        rt.send(0, 1, 1, vec![2]).unwrap();
        assert_eq!(rt.recv(1, Some(0), Some(1)).unwrap().payload, vec![1]);
        assert_eq!(rt.recv(1, Some(0), Some(1)).unwrap().payload, vec![2]);
        assert_eq!(rt.recv(1, Some(0), Some(2)).unwrap().payload, vec![9]);
        assert!(matches!(
            rt.recv(1, None, None),
            Err(NetError::NoMessage { .. })
        ));
    }

    #[test]
    fn transit_cost_follows_cost_model() {
        let mut rt = rt(3, 1, "multirail_tcp");
        let r = rt.send(0, 1, 0, vec![0; 100]).unwrap();
        assert_eq!(r.rail.as_deref(), Some("tcp_mpi"));
        assert_eq!(r.arrival - r.sent_at, DriverKind::Tcp.latency() + 100);
        rt.recv(1, None, None).unwrap();
        assert_eq!(rt.clock(1).unwrap(), r.arrival);
    }

    #[test]
    fn send_to_killed_process_fails() {
        let mut rt = rt(3, 1, "shm");
        rt.kill(2);
        assert_eq!(rt.send(0, 2, 0, vec![1]), Err(NetError::PeerFailed(2)));
    }

    #[test]
    fn intra_process_messages_bypass_rails() {
        let mut rt = rt(2, 2, "multirail_tcp");
        let r = rt.send(0, 1, 0, vec![5; 64 * 1024]).unwrap();
        assert_eq!(r.rail, None);
        assert_eq!(rt.on_demand_connects(), 0);
        assert_eq!(rt.recv(1, None, None).unwrap().payload.len(), 64 * 1024);
    }

    #[test]
    fn large_message_to_far_process_connects_on_demand() {
        let mut rt = rt(8, 1, "multirail_tcp");
        let r = rt.send(0, 5, 0, vec![1; 64 * 1024]).unwrap();
        assert!(r.connected_on_demand);
        assert_eq!(r.rail.as_deref(), Some("tcp_large"));
        let large = rt.rail_id("tcp_large").unwrap();
        assert!(rt.table(0).get(5, large).is_some());
        assert!(rt.table(5).get(0, large).is_some());
        // second message reuses the route
        let r2 = rt.send(0, 5, 0, vec![1; 64 * 1024]).unwrap();
        assert!(!r2.connected_on_demand);
        assert_eq!(rt.on_demand_connects(), 1);
    }

    #[test]
    fn close_removes_only_that_rail() {
        let mut rt = rt(6, 1, "ib_shm");
        rt.send(0, 3, 0, vec![1; 16]).unwrap();
        rt.recv(3, None, None).unwrap();
        assert!(!rt.rdma_state(0, "rdma").unwrap().is_empty());
        let ring_before: usize = (0..6).map(|p| rt.table(p).len()).sum::<usize>() - 2;
        assert_eq!(rt.close_rail("rdma").unwrap(), 2);
        let rdma = rt.rail_id("rdma").unwrap();
        for p in 0..6 {
            assert!(rt.table(p).iter().all(|e| e.rail != rdma));
            assert!(rt.rdma_state(p, "rdma").is_none());
        }
        let ring_after: usize = (0..6).map(|p| rt.table(p).len()).sum();
        assert_eq!(ring_before, ring_after);
    }

    #[test]
    fn close_empty_rail_and_busy_rail() {
        let mut rt = rt(4, 1, "ib_shm");
        assert_eq!(rt.close_rail("rdma").unwrap(), 0);
        rt.reopen_rail("rdma").unwrap();
        rt.send(0, 2, 0, vec![0; 8]).unwrap();
        assert_eq!(
            rt.close_rail("rdma"),
            Err(NetError::RailBusy {
                rail: "rdma".into(),
                in_flight: 1
            })
        );
        rt.recv(2, None, None).unwrap();
        assert_eq!(rt.close_rail("rdma").unwrap(), 2);
    }

    #[test]
    fn reopen_reconnects_lazily() {
        let mut rt = rt(8, 1, "multirail_tcp");
        rt.close_rail("tcp_large").unwrap();
        rt.reopen_rail("tcp_large").unwrap();
        let large = rt.rail_id("tcp_large").unwrap();
        assert!((0..8).all(|p| rt.table(p).iter().all(|e| e.rail != large)));
        let before = rt.on_demand_connects();
        rt.send(0, 4, 0, vec![0; 40_000]).unwrap();
        assert_eq!(rt.on_demand_connects() - before, 1);
        assert_eq!(
            rt.reopen_rail("nope"),
            Err(NetError::UnknownRail("nope".into()))
        );
        rt.reopen_rail("tcp_large").unwrap();
    }

    #[test]
    fn ring_rail_reopen_restores_static_routes() {
        let mut rt = rt(5, 1, "multirail_tcp");
        rt.close_rail("tcp_mpi").unwrap();
        assert!((0..5).all(|p| rt.table(p).is_empty()));
        rt.reopen_rail("tcp_mpi").unwrap();
        assert!((0..5).all(|p| rt.table(p).len() == 2));
    }

    #[test]
    fn allreduce_rejects_helpers() {
        let mut rt = rt(2, 1, "shm");
        let h = rt.attach_helper(0, HelperLane::new(false, 1, 4));
        assert_eq!(
            rt.allreduce_max(&[0, h], &[1.0, 2.0]),
            Err(NetError::HelperInCollective(h))
        );
        assert_eq!(rt.allreduce_max(&[0, 1], &[1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(rt.clock(0).unwrap(), rt.clock(1).unwrap());
    }

    #[test]
    fn allreduce_odd_world() {
        let mut rt = rt(5, 1, "multirail_tcp");
        let world: Vec<usize> = (0..5).collect();
        let v = rt
            .allreduce_max(&world, &[0.5, 3.0, -1.0, 2.0, 7.5])
            .unwrap();
        assert_eq!(v, 7.5);
        assert!((0..5).all(|r| rt.pending(r) == 0));
    }
}
