//! Routed control messages over whatever routes currently exist.
//!
//! Each hop forwards to the neighbor closest to the target under the plain
//! `|n - t|` metric on rank ids. With the ±1 ring edges always present the
//! distance strictly drops at every hop, so a message needs at most
//! `|origin - target|` hops.

use std::collections::BTreeSet;

use crate::multirail::{Frame, FrameType, NetError, ProcessId, RailId, Runtime};
use crate::sched::Ticks;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    ConnRequest = 0,
    ConnAck = 1,
    BarrierToken = 2,
    Probe = 3,
}

impl ControlKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ControlKind::ConnRequest),
            1 => Some(ControlKind::ConnAck),
            2 => Some(ControlKind::BarrierToken),
            3 => Some(ControlKind::Probe),
            _ => None,
        }
    }
}

/// `[u8 kind][u64 origin][u64 target][u32 hops][u32 ttl][u32 len][bytes]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub origin: ProcessId,
    pub target: ProcessId,
    pub hops: u32,
    pub ttl: u32,
    pub payload: Vec<u8>,
}

const CONTROL_HEADER_LEN: usize = 1 + 8 + 8 + 4 + 4 + 4;

impl ControlMessage {
    pub fn new(
        kind: ControlKind,
        origin: ProcessId,
        target: ProcessId,
        ttl: u32,
        payload: Vec<u8>,
    ) -> Self {
        ControlMessage {
            kind,
            origin,
            target,
            hops: 0,
            ttl,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CONTROL_HEADER_LEN + self.payload.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.origin as u64).to_le_bytes());
        out.extend_from_slice(&(self.target as u64).to_le_bytes());
        out.extend_from_slice(&self.hops.to_le_bytes());
        out.extend_from_slice(&self.ttl.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, NetError> {
        if buf.len() < CONTROL_HEADER_LEN {
            return Err(NetError::Malformed("short control message".into()));
        }
        let kind = ControlKind::from_u8(buf[0])
            .ok_or_else(|| NetError::Malformed(format!("unknown control kind {}", buf[0])))?;
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let len = u32_at(25) as usize;
        let payload = buf
            .get(CONTROL_HEADER_LEN..CONTROL_HEADER_LEN + len)
            .ok_or_else(|| NetError::Malformed("truncated control payload".into()))?
            .to_vec();
        Ok(ControlMessage {
            kind,
            origin: u64_at(1) as usize,
            target: u64_at(9) as usize,
            hops: u32_at(17),
            ttl: u32_at(21),
            payload,
        })
    }
}

/// Processes reachable from one process through a connected endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteView {
    pub neighbors: BTreeSet<ProcessId>,
}

impl RouteView {
    pub fn new(neighbors: impl IntoIterator<Item = ProcessId>) -> Self {
        RouteView {
            neighbors: neighbors.into_iter().collect(),
        }
    }

    /// The ring alone: `{current - 1, current + 1}` modulo `n`.
    pub fn ring(current: ProcessId, n: usize) -> Self {
        if n < 2 {
            return RouteView::default();
        }
        RouteView::new([(current + n - 1) % n, (current + 1) % n])
    }
}

fn dist(a: ProcessId, b: ProcessId) -> usize {
    a.abs_diff(b)
}

/// Neighbor minimizing `|n - target|`, ties to the smaller rank. Fails when
/// no neighbor is strictly closer than `current`.
pub fn route_next_hop(
    current: ProcessId,
    target: ProcessId,
    view: &RouteView,
) -> Result<ProcessId, NetError> {
    // BTreeSet iterates ascending, so min_by_key keeps the smaller rank on ties
    let best = view
        .neighbors
        .iter()
        .copied()
        .min_by_key(|&n| dist(n, target));
    match best {
        Some(n) if dist(n, target) < dist(current, target) => Ok(n),
        _ => Err(NetError::NoProgress { current, target }),
    }
}

/// Walks the greedy route and returns the visited processes, origin first.
pub fn greedy_path(
    origin: ProcessId,
    target: ProcessId,
    ttl: u32,
    mut view_of: impl FnMut(ProcessId) -> RouteView,
) -> Result<Vec<ProcessId>, NetError> {
    let mut path = vec![origin];
    let mut cur = origin;
    while cur != target {
        if path.len() as u32 > ttl {
            return Err(NetError::TtlExceeded { ttl });
        }
        cur = route_next_hop(cur, target, &view_of(cur))?;
        path.push(cur);
    }
    Ok(path)
}

/// A control message as it reached its target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub message: ControlMessage,
    pub path: Vec<ProcessId>,
    /// Virtual ticks spent in transit across all hops.
    pub ticks: Ticks,
}

impl Runtime {
    pub fn route_view(&self, p: ProcessId) -> RouteView {
        RouteView::new(self.procs[p].table.neighbors(&self.procs[p].rail_open))
    }

    /// Default ttl: the number of processes, an upper bound on any greedy path.
    pub fn default_ttl(&self) -> u32 {
        self.procs.len() as u32
    }

    /// Routes a control message hop by hop. Each hop is a control frame on the
    /// highest-priority open endpoint towards the chosen neighbor.
    pub fn deliver_control(&mut self, mut msg: ControlMessage) -> Result<Delivered, NetError> {
        let n = self.procs.len();
        if msg.origin >= n || msg.target >= n {
            return Err(NetError::NoRouteToProcess {
                from: msg.origin,
                to: msg.target,
            });
        }
        let mut path = vec![msg.origin];
        let mut cur = msg.origin;
        let mut ticks = 0;
        while cur != msg.target {
            if !self.procs[cur].alive {
                return Err(NetError::PeerFailed(cur));
            }
            if msg.hops >= msg.ttl {
                return Err(NetError::TtlExceeded { ttl: msg.ttl });
            }
            let next = route_next_hop(cur, msg.target, &self.route_view(cur))?;
            if !self.procs[next].alive {
                return Err(NetError::PeerFailed(next));
            }
            let rail = self.control_rail(cur, next);
            msg.hops += 1;
            let frame = Frame {
                frame_type: FrameType::Control,
                src_process: cur as u64,
                dst_process: next as u64,
                src_task: 0,
                dst_task: 0,
                tag: 0,
                payload: msg.encode(),
            };
            // store and forward: the next hop decodes what it received
            let wire = frame.encode();
            let (back, _) = Frame::decode(&wire)?;
            msg = ControlMessage::decode(&back.payload)?;
            ticks += self.rails[rail.0].driver.latency()
                + self.cost().net_per_byte * back.payload.len() as u64;
            cur = next;
            path.push(cur);
        }
        Ok(Delivered {
            message: msg,
            path,
            ticks,
        })
    }

    fn control_rail(&self, from: ProcessId, to: ProcessId) -> RailId {
        let ps = &self.procs[from];
        ps.table
            .endpoints(to)
            .iter()
            .find(|e| ps.rail_open[e.rail.0])
            .map(|e| e.rail)
            .expect("route view only lists reachable neighbors")
    }

    /// Negotiates a route on `rail` between two processes with a routed
    /// ConnRequest/ConnAck pair. Idempotent: an existing endpoint costs
    /// nothing. Returns the virtual ticks the exchange took.
    pub fn request_connection(
        &mut self,
        origin: ProcessId,
        target: ProcessId,
        rail: RailId,
    ) -> Result<Ticks, NetError> {
        if origin == target {
            return Err(NetError::SelfConnect(origin));
        }
        let name = self.rails[rail.0].name.clone();
        if !self.procs[origin].rail_open[rail.0] {
            return Err(NetError::RailClosed(name));
        }
        if self.procs[origin].table.get(target, rail).is_some() {
            return Ok(0);
        }
        let timeout = |e: NetError| match e {
            NetError::PeerFailed(_)
            | NetError::NoProgress { .. }
            | NetError::TtlExceeded { .. } => NetError::ConnectTimeout {
                to: target,
                rail: name.clone(),
            },
            other => other,
        };
        let ttl = self.default_ttl();
        let info = format!("{}:{}", name, origin);
        let req = ControlMessage::new(
            ControlKind::ConnRequest,
            origin,
            target,
            ttl,
            info.into_bytes(),
        );
        let there = self.deliver_control(req).map_err(timeout)?;
        let target_info = self.accept_connection(target, origin, rail)?;
        let ack = ControlMessage::new(
            ControlKind::ConnAck,
            target,
            origin,
            ttl,
            target_info.clone().into_bytes(),
        );
        let back = self.deliver_control(ack).map_err(timeout)?;
        let ticks = there.ticks + back.ticks;
        if ticks > self.opts.connect_timeout {
            self.procs[target].table.remove(origin, rail);
            return Err(NetError::ConnectTimeout {
                to: target,
                rail: name,
            });
        }
        self.complete_connection(origin, target, rail, target_info);
        Ok(ticks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{JobSpec, NetConfig};
    use crate::multirail::{Fault, RuntimeOptions};
    use proptest::prelude::*;

    fn rt(n: usize) -> Runtime {
        Runtime::start(
            JobSpec::new(n, 1, "multirail_tcp"),
            NetConfig::builtin(),
            RuntimeOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn next_hop_examples() {
        assert_eq!(route_next_hop(0, 3, &RouteView::new([7, 1])).unwrap(), 1);
        assert_eq!(route_next_hop(0, 7, &RouteView::new([7, 1])).unwrap(), 7);
        assert_eq!(
            route_next_hop(0, 6, &RouteView::new([1, 15, 4])).unwrap(),
            4
        );
    }

    #[test]
    fn next_hop_ties_and_failures() {
        // 2 and 6 are both at distance 2 from 4
        assert_eq!(route_next_hop(0, 4, &RouteView::new([6, 2])).unwrap(), 2);
        assert_eq!(
            route_next_hop(3, 5, &RouteView::new([0, 1])),
            Err(NetError::NoProgress {
                current: 3,
                target: 5
            })
        );
        assert!(route_next_hop(3, 5, &RouteView::default()).is_err());
    }

    #[test]
    fn control_codec_layout() {
        let m = ControlMessage::new(ControlKind::Probe, 2, 9, 16, b"abc".to_vec());
        let b = m.encode();
        assert_eq!(b.len(), 29 + 3);
        assert_eq!(b[0], 3);
        assert_eq!(&b[1..9], &2u64.to_le_bytes());
        assert_eq!(&b[9..17], &9u64.to_le_bytes());
        assert_eq!(&b[21..25], &16u32.to_le_bytes());
        assert_eq!(&b[25..29], &3u32.to_le_bytes());
        assert_eq!(ControlMessage::decode(&b).unwrap(), m);
        assert!(ControlMessage::decode(&b[..30]).is_err());
    }

    #[test]
    fn ring_only_routes() {
        let mut rt = rt(8);
        // |7 - 5| < |1 - 5|, so the wrap edge is taken
        let d = rt
            .deliver_control(ControlMessage::new(ControlKind::Probe, 0, 5, 8, vec![1]))
            .unwrap();
        assert_eq!(d.path, vec![0, 7, 6, 5]);
        let d = rt
            .deliver_control(ControlMessage::new(ControlKind::Probe, 1, 5, 8, vec![]))
            .unwrap();
        assert_eq!(d.message.hops, 4);
        let d = rt
            .deliver_control(ControlMessage::new(ControlKind::Probe, 3, 4, 8, vec![]))
            .unwrap();
        assert_eq!(d.message.hops, 1);
    }

    #[test]
    fn shortcut_after_connection() {
        let mut rt = rt(8);
        let large = rt.rail_id("tcp_large").unwrap();
        rt.request_connection(0, 5, large).unwrap();
        assert!(rt.table(0).get(5, large).is_some());
        assert!(rt.table(5).get(0, large).is_some());
        let d = rt
            .deliver_control(ControlMessage::new(ControlKind::Probe, 0, 5, 8, vec![]))
            .unwrap();
        assert_eq!(d.message.hops, 1);
        // idempotent
        assert_eq!(rt.request_connection(0, 5, large).unwrap(), 0);
        assert_eq!(rt.table(0).endpoints(5).len(), 1);
        assert_eq!(rt.on_demand_connects(), 1);
    }

    #[test]
    fn ttl_and_dead_transit() {
        let mut rt = rt(8);
        assert_eq!(
            rt.deliver_control(ControlMessage::new(ControlKind::Probe, 1, 6, 3, vec![])),
            Err(NetError::TtlExceeded { ttl: 3 })
        );
        rt.kill(3);
        assert_eq!(
            rt.deliver_control(ControlMessage::new(ControlKind::Probe, 1, 6, 8, vec![])),
            Err(NetError::PeerFailed(3))
        );
    }

    #[test]
    fn self_connect_rejected() {
        let mut rt = rt(4);
        let large = rt.rail_id("tcp_large").unwrap();
        assert_eq!(
            rt.request_connection(1, 1, large),
            Err(NetError::SelfConnect(1))
        );
    }

    #[test]
    fn rail_closed_mid_handshake_times_out() {
        let mut rt = rt(8);
        rt.inject(Fault::CloseRailOnConnRequest {
            rail: "tcp_large".into(),
        });
        let large = rt.rail_id("tcp_large").unwrap();
        assert!(matches!(
            rt.request_connection(0, 5, large),
            Err(NetError::ConnectTimeout { to: 5, .. })
        ));
        assert!(rt.table(0).get(5, large).is_none());
        assert!(rt.table(5).get(0, large).is_none());
    }

    #[test]
    fn unreachable_target_times_out() {
        let mut rt = rt(8);
        rt.kill(5);
        let large = rt.rail_id("tcp_large").unwrap();
        assert!(matches!(
            rt.request_connection(0, 5, large),
            Err(NetError::ConnectTimeout { .. })
        ));
    }

    /// Hand-derived hop count of greedy routing on a bare ring: only the two
    /// ends of the rank line can profit from the wrap edge, and only on the
    /// first hop.
    fn ring_hops_oracle(n: usize, s: usize, t: usize) -> usize {
        if s == 0 && t > 0 && n - 1 - t < t - 1 {
            n - t
        } else if s == n - 1 && n > 2 && 2 * t < n - 2 {
            t + 1
        } else {
            s.abs_diff(t)
        }
    }

    #[test]
    fn exhaustive_ring_hops() {
        for n in 2..=64usize {
            for o in 0..n {
                for t in 0..n {
                    let path = greedy_path(o, t, n as u32, |c| RouteView::ring(c, n)).unwrap();
                    let hops = path.len() - 1;
                    assert_eq!(hops, ring_hops_oracle(n, o, t), "n={n} {o}->{t}");
                    assert!(hops <= o.abs_diff(t));
                    if o != 0 && o != n - 1 {
                        assert_eq!(hops, o.abs_diff(t));
                    }
                }
            }
        }
    }

    #[test]
    fn extra_shortcut_can_lengthen_greedy_route() {
        // greedy routing is not monotone in the edge set: with 1↔9 alone the
        // route 0→10 is 0,1,9,10; adding 0↔2 lures it onto the ring
        let n = 32;
        let view = |extra: &[(usize, usize)]| {
            let extra = extra.to_vec();
            move |c: usize| {
                let mut v = RouteView::ring(c, n);
                for &(a, b) in &extra {
                    if a == c {
                        v.neighbors.insert(b);
                    }
                    if b == c {
                        v.neighbors.insert(a);
                    }
                }
                v
            }
        };
        let a = greedy_path(0, 10, 32, view(&[(1, 9)])).unwrap();
        let b = greedy_path(0, 10, 32, view(&[(1, 9), (0, 2)])).unwrap();
        assert_eq!(a.len() - 1, 3);
        assert_eq!(b.len() - 1, 9);
    }

    proptest! {
        #[test]
        fn shortcuts_never_exceed_ring_distance(
            n in 2usize..64,
            pairs in proptest::collection::vec((0usize..64, 0usize..64), 0..40),
            o in 0usize..64,
            t in 0usize..64,
        ) {
            let (o, t) = (o % n, t % n);
            let pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (a % n, b % n)).collect();
            let path = greedy_path(o, t, n as u32, |c| {
                let mut v = RouteView::ring(c, n);
                for &(a, b) in &pairs {
                    if a == c && b != c { v.neighbors.insert(b); }
                    if b == c && a != c { v.neighbors.insert(a); }
                }
                v
            }).unwrap();
            prop_assert!(path.len() - 1 <= o.abs_diff(t));
            for w in path.windows(2) {
                prop_assert!(w[1].abs_diff(t) < w[0].abs_diff(t));
            }
        }

        #[test]
        fn payload_survives_routing(payload in proptest::collection::vec(any::<u8>(), 0..256), t in 1usize..6) {
            let mut rt = rt(6);
            let d = rt.deliver_control(ControlMessage::new(ControlKind::Probe, 0, t, 6, payload.clone())).unwrap();
            prop_assert_eq!(d.message.payload, payload);
            prop_assert!(d.message.hops as usize <= t);
            prop_assert_eq!(d.path.len() - 1, d.message.hops as usize);
        }

        #[test]
        fn control_codec_roundtrip(kind in 0u8..4, o: u32, t: u32, hops: u32, ttl: u32,
                                   payload in proptest::collection::vec(any::<u8>(), 0..128)) {
            let m = ControlMessage {
                kind: ControlKind::from_u8(kind).unwrap(),
                origin: o as usize, target: t as usize, hops, ttl, payload,
            };
            prop_assert_eq!(ControlMessage::decode(&m.encode()).unwrap(), m);
        }
    }
}
