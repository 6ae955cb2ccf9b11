//! Multi-rail message transport.
//!
//! Every logical process keeps, per remote process, an ordered list of
//! endpoints. Sending a message walks that list and elects the first usable
//! endpoint; when none fits, rails are walked in priority order to create a
//! route on demand. Rails can be closed as a whole (dropping every endpoint
//! and driver resource) and reopened lazily.

mod frame;
mod runtime;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::RailSpec;

pub use frame::{Frame, FrameType, FRAME_HEADER_LEN};
pub use runtime::{
    Envelope, Event, Fault, MockRdmaState, QpToken, Receipt, Runtime, RuntimeOptions, TaskSlot,
};

pub type ProcessId = usize;
pub type TaskRank = usize;

/// Index of a rail in the runtime's priority-sorted rail list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RailId(pub usize);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("no route to process {to} from process {from}")]
    NoRouteToProcess { from: ProcessId, to: ProcessId },
    #[error("connection to process {to} over `{rail}` timed out")]
    ConnectTimeout { to: ProcessId, rail: String },
    #[error("rail `{0}` is closed")]
    RailClosed(String),
    #[error("rail `{rail}` has {in_flight} unacknowledged frames")]
    RailBusy { rail: String, in_flight: u64 },
    #[error("unknown rail `{0}`")]
    UnknownRail(String),
    #[error("process {0} has failed")]
    PeerFailed(ProcessId),
    #[error("no neighbor of process {current} gets closer to {target}")]
    NoProgress {
        current: ProcessId,
        target: ProcessId,
    },
    #[error("control message exceeded its ttl of {ttl} hops")]
    TtlExceeded { ttl: u32 },
    #[error("connection request to self (process {0})")]
    SelfConnect(ProcessId),
    #[error("unknown task rank {0}")]
    UnknownTask(TaskRank),
    #[error("no matching message for task {task} (src {src:?}, tag {tag:?})")]
    NoMessage {
        task: TaskRank,
        src: Option<TaskRank>,
        tag: Option<i64>,
    },
    #[error("collective includes non-application task {0}")]
    HelperInCollective(TaskRank),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EndpointState {
    Connected,
    Pending,
    Closed,
}

impl EndpointState {
    pub fn code(self) -> u8 {
        match self {
            EndpointState::Connected => 0,
            EndpointState::Pending => 1,
            EndpointState::Closed => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EndpointState::Connected),
            1 => Some(EndpointState::Pending),
            2 => Some(EndpointState::Closed),
            _ => None,
        }
    }
}

/// Whether a route was wired at bootstrap along the ring, or created later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteOrigin {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub rail: RailId,
    pub priority: u32,
    pub remote: ProcessId,
    pub state: EndpointState,
    pub origin: RouteOrigin,
    /// Driver handle: socket address, shared-memory channel or queue pair.
    pub conn_info: String,
    /// Creation order, used to break priority ties.
    pub seq: u64,
}

/// Per-remote endpoint lists ordered by (priority desc, creation order).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointTable {
    lists: BTreeMap<ProcessId, Vec<Endpoint>>,
}

impl EndpointTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts in order. Returns `false` if the (rail, remote) pair exists.
    pub fn insert(&mut self, ep: Endpoint) -> bool {
        let list = self.lists.entry(ep.remote).or_default();
        if list.iter().any(|e| e.rail == ep.rail) {
            return false;
        }
        let pos = list
            .iter()
            .position(|e| {
                (e.priority, std::cmp::Reverse(e.seq)) < (ep.priority, std::cmp::Reverse(ep.seq))
            })
            .unwrap_or(list.len());
        list.insert(pos, ep);
        true
    }

    pub fn endpoints(&self, remote: ProcessId) -> &[Endpoint] {
        self.lists.get(&remote).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, remote: ProcessId, rail: RailId) -> Option<&Endpoint> {
        self.endpoints(remote).iter().find(|e| e.rail == rail)
    }

    pub fn remove(&mut self, remote: ProcessId, rail: RailId) -> Option<Endpoint> {
        let list = self.lists.get_mut(&remote)?;
        let pos = list.iter().position(|e| e.rail == rail)?;
        let ep = list.remove(pos);
        if list.is_empty() {
            self.lists.remove(&remote);
        }
        Some(ep)
    }

    /// Drops every endpoint of `rail`. Returns how many were removed.
    pub fn remove_rail(&mut self, rail: RailId) -> usize {
        let mut removed = 0;
        self.lists.retain(|_, list| {
            let before = list.len();
            list.retain(|e| e.rail != rail);
            removed += before - list.len();
            !list.is_empty()
        });
        removed
    }

    pub fn iter(&self) -> impl Iterator<Item = &Endpoint> {
        self.lists.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Remotes reachable through at least one connected endpoint on an open rail.
    pub fn neighbors(&self, rail_open: &[bool]) -> Vec<ProcessId> {
        self.lists
            .iter()
            .filter(|(_, l)| {
                l.iter().any(|e| {
                    e.state == EndpointState::Connected
                        && rail_open.get(e.rail.0).copied().unwrap_or(false)
                })
            })
            .map(|(r, _)| *r)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src_task: TaskRank,
    pub dst_task: TaskRank,
    pub src_process: ProcessId,
    pub dst_process: ProcessId,
    pub tag: i64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn size(&self) -> usize {
        self.payload.len()
    }
}

/// Outcome of endpoint election.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Election {
    Existing(Endpoint),
    /// No listed endpoint fits; create one on this rail.
    Create(RailId),
}

/// Elects a route for `msg`. `rails` is indexed by [`RailId`] and sorted by
/// priority; `rail_open` gives the local open state of each rail.
///
/// Existing connected endpoints are tried first in list order. Otherwise the
/// highest-priority open rail whose gates accept the message is chosen for
/// on-demand creation.
pub fn elect_endpoint(
    table: &EndpointTable,
    msg: &Message,
    rails: &[RailSpec],
    rail_open: &[bool],
) -> Result<Election, NetError> {
    let size = msg.size();
    let open = |r: RailId| rail_open.get(r.0).copied().unwrap_or(false);
    if let Some(ep) = table.endpoints(msg.dst_process).iter().find(|e| {
        e.state == EndpointState::Connected && open(e.rail) && rails[e.rail.0].gates_pass(size)
    }) {
        return Ok(Election::Existing(ep.clone()));
    }
    rails
        .iter()
        .enumerate()
        .find(|(i, r)| open(RailId(*i)) && r.gates_pass(size))
        .map(|(i, _)| Election::Create(RailId(i)))
        .ok_or(NetError::NoRouteToProcess {
            from: msg.src_process,
            to: msg.dst_process,
        })
}
