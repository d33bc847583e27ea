//! Distance-vector mesh routing with sequence numbers and a feasibility
//! condition.
//!
//! Every node originates a route to itself stamped with its own sequence
//! number. A node only selects a route whose advertisement is *feasible*:
//! either it carries a newer sequence number than the node's recorded
//! feasibility distance, or the same sequence number with a strictly smaller
//! advertised metric. Because the feasibility distance can only shrink for a
//! given sequence number, and only the destination can issue a new one, the
//! next-hop graph toward every destination stays acyclic at all times.
//!
//! When the feasibility condition leaves a node without a route even though
//! neighbors still advertise one (starvation), it asks the destination for a
//! fresh sequence number with a [`RouteMsgBody::SeqnoRequest`].
//!
//! [`RouterState`] is a pure state machine: handlers return the messages to
//! emit and never perform I/O.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodeId;

/// 16-bit wrapping sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SeqNo(pub u16);

impl SeqNo {
    /// Strictly newer under modular comparison. Numbers exactly half the
    /// space apart are incomparable.
    pub fn is_newer_than(self, other: SeqNo) -> bool {
        let d = self.0.wrapping_sub(other.0);
        d != 0 && d < 0x8000
    }

    pub fn next(self) -> SeqNo {
        SeqNo(self.0.wrapping_add(1))
    }
}

impl fmt::Display for SeqNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Hop-count metric; `0xFFFF` means unreachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Metric(pub u16);

impl Metric {
    pub const INFINITY: Metric = Metric(0xFFFF);
    pub const ZERO: Metric = Metric(0);

    pub fn is_infinite(self) -> bool {
        self == Self::INFINITY
    }

    /// Adds a link cost, saturating to infinity.
    pub fn plus(self, cost: u16) -> Metric {
        if self.is_infinite() {
            return self;
        }
        let sum = self.0 as u32 + cost as u32;
        if sum >= 0xFFFF {
            Metric::INFINITY
        } else {
            Metric(sum as u16)
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Lowest (seqno, metric) this node has selected for a destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityDistance {
    pub seqno: SeqNo,
    pub metric: Metric,
}

/// Feasibility condition for an advertisement of `(seqno, metric)`.
pub fn feasible(record: Option<FeasibilityDistance>, seqno: SeqNo, metric: Metric) -> bool {
    if metric.is_infinite() {
        return true;
    }
    match record {
        None => true,
        Some(fd) => seqno.is_newer_than(fd.seqno) || (seqno == fd.seqno && metric < fd.metric),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub destination: NodeId,
    /// Neighbor that advertised the route; the next hop.
    pub advertiser: NodeId,
    /// Metric through this neighbor, link cost included.
    pub metric: Metric,
    /// Metric as advertised by the neighbor.
    pub advertised: Metric,
    pub seqno: SeqNo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteMsgBody {
    Hello { interval_cs: u16 },
    Update { destination: NodeId, seqno: SeqNo, metric: Metric },
    Retract { destination: NodeId },
    SeqnoRequest { destination: NodeId, wanted: SeqNo, hop_limit: u8 },
}

/// Encoded size of one body.
pub const BODY_BYTES: usize = 7;

const TYPE_HELLO: u8 = 1;
const TYPE_UPDATE: u8 = 2;
const TYPE_REQUEST: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated route message: {0} trailing bytes")]
    Truncated(usize),
    #[error("unknown route message type {0:#04x}")]
    UnknownType(u8),
}

impl RouteMsgBody {
    /// An update, normalised to a retraction when the metric is infinite.
    pub fn update(destination: NodeId, seqno: SeqNo, metric: Metric) -> Self {
        if metric.is_infinite() {
            RouteMsgBody::Retract { destination }
        } else {
            RouteMsgBody::Update { destination, seqno, metric }
        }
    }

    /// Fixed little-endian layout: type (1), destination (2), seqno (2), metric (2).
    ///
    /// Hello puts the broadcast id in the destination and its interval (in
    /// centiseconds) in the metric field. A retraction is an update with
    /// metric `0xFFFF` and seqno 0. A seqno request carries the wanted seqno
    /// and its remaining hop limit in the metric field.
    pub fn encode(&self) -> [u8; BODY_BYTES] {
        let (t, d, s, m) = match *self {
            RouteMsgBody::Hello { interval_cs } => (TYPE_HELLO, NodeId::BROADCAST.0, 0, interval_cs),
            RouteMsgBody::Update { destination, seqno, metric } => (TYPE_UPDATE, destination.0, seqno.0, metric.0),
            RouteMsgBody::Retract { destination } => (TYPE_UPDATE, destination.0, 0, Metric::INFINITY.0),
            RouteMsgBody::SeqnoRequest { destination, wanted, hop_limit } => {
                (TYPE_REQUEST, destination.0, wanted.0, hop_limit as u16)
            }
        };
        let mut out = [0u8; BODY_BYTES];
        out[0] = t;
        out[1..3].copy_from_slice(&d.to_le_bytes());
        out[3..5].copy_from_slice(&s.to_le_bytes());
        out[5..7].copy_from_slice(&m.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; BODY_BYTES]) -> Result<Self, WireError> {
        let d = NodeId(u16::from_le_bytes([bytes[1], bytes[2]]));
        let s = SeqNo(u16::from_le_bytes([bytes[3], bytes[4]]));
        let m = u16::from_le_bytes([bytes[5], bytes[6]]);
        match bytes[0] {
            TYPE_HELLO => Ok(RouteMsgBody::Hello { interval_cs: m }),
            TYPE_UPDATE => Ok(RouteMsgBody::update(d, s, Metric(m))),
            TYPE_REQUEST => Ok(RouteMsgBody::SeqnoRequest {
                destination: d,
                wanted: s,
                hop_limit: m.min(u8::MAX as u16) as u8,
            }),
            t => Err(WireError::UnknownType(t)),
        }
    }
}

/// Concatenates encoded bodies.
pub fn encode_all(bodies: &[RouteMsgBody]) -> Vec<u8> {
    bodies.iter().flat_map(|b| b.encode()).collect()
}

pub fn decode_all(bytes: &[u8]) -> Result<Vec<RouteMsgBody>, WireError> {
    let chunks = bytes.chunks_exact(BODY_BYTES);
    if !chunks.remainder().is_empty() {
        return Err(WireError::Truncated(chunks.remainder().len()));
    }
    chunks
        .map(|c| RouteMsgBody::decode(c.try_into().expect("exact chunk")))
        .collect()
}

/// A message the router wants sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    Broadcast(RouteMsgBody),
    Unicast { to: NodeId, body: RouteMsgBody },
}

impl Emission {
    pub fn body(&self) -> RouteMsgBody {
        match *self {
            Emission::Broadcast(b) | Emission::Unicast { body: b, .. } => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub hello_interval_s: f64,
    pub update_interval_s: f64,
    pub hold_multiplier: u32,
    pub request_hop_limit: u8,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self { hello_interval_s: 4.0, update_interval_s: 16.0, hold_multiplier: 3, request_hop_limit: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Neighbor {
    last_hello: f64,
    hold_s: f64,
    cost: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    id: NodeId,
    own_seqno: SeqNo,
    config: RoutingConfig,
    neighbors: BTreeMap<NodeId, Neighbor>,
    routes: BTreeMap<NodeId, BTreeMap<NodeId, RouteEntry>>,
    selected: BTreeMap<NodeId, RouteEntry>,
    feasibility: BTreeMap<NodeId, FeasibilityDistance>,
    forwarded_requests: BTreeMap<(NodeId, u16), f64>,
    ignored_updates: u64,
}

impl RouterState {
    pub fn new(id: NodeId, config: RoutingConfig) -> Self {
        Self {
            id,
            own_seqno: SeqNo(0),
            config,
            neighbors: BTreeMap::new(),
            routes: BTreeMap::new(),
            selected: BTreeMap::new(),
            feasibility: BTreeMap::new(),
            forwarded_requests: BTreeMap::new(),
            ignored_updates: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn own_seqno(&self) -> SeqNo {
        self.own_seqno
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn neighbors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.neighbors.keys().copied()
    }

    pub fn is_neighbor(&self, n: NodeId) -> bool {
        self.neighbors.contains_key(&n)
    }

    /// Updates dropped because they came from a node not yet heard via hello.
    pub fn ignored_updates(&self) -> u64 {
        self.ignored_updates
    }

    /// Selected entry for `dest`, including a held retraction (infinite metric).
    pub fn selected(&self, dest: NodeId) -> Option<&RouteEntry> {
        self.selected.get(&dest)
    }

    pub fn selected_routes(&self) -> impl Iterator<Item = &RouteEntry> {
        self.selected.values()
    }

    /// Next hop toward `dest` if a finite route is selected.
    pub fn next_hop(&self, dest: NodeId) -> Option<NodeId> {
        self.selected
            .get(&dest)
            .filter(|e| !e.metric.is_infinite())
            .map(|e| e.advertiser)
    }

    /// Metric toward `dest`: 0 for self, infinity when unreachable.
    pub fn metric_to(&self, dest: NodeId) -> Metric {
        if dest == self.id {
            return Metric::ZERO;
        }
        self.selected.get(&dest).map_or(Metric::INFINITY, |e| e.metric)
    }

    pub fn feasibility(&self, dest: NodeId) -> Option<FeasibilityDistance> {
        self.feasibility.get(&dest).copied()
    }

    /// Entries currently stored for `dest`, one per advertising neighbor.
    pub fn entries(&self, dest: NodeId) -> impl Iterator<Item = &RouteEntry> {
        self.routes.get(&dest).into_iter().flat_map(|m| m.values())
    }

    pub fn hello(&self) -> RouteMsgBody {
        let cs = (self.config.hello_interval_s * 100.0).round().clamp(1.0, u16::MAX as f64) as u16;
        RouteMsgBody::Hello { interval_cs: cs }
    }

    fn self_update(&self) -> RouteMsgBody {
        RouteMsgBody::update(self.id, self.own_seqno, Metric::ZERO)
    }

    /// Dispatches one received body.
    pub fn handle_message(&mut self, from: NodeId, body: RouteMsgBody, now: f64) -> Vec<Emission> {
        match body {
            RouteMsgBody::Hello { interval_cs } => self.handle_hello(from, interval_cs, now),
            RouteMsgBody::Update { destination, seqno, metric } => {
                self.handle_update(from, destination, seqno, metric, now)
            }
            RouteMsgBody::Retract { destination } => {
                self.handle_update(from, destination, SeqNo(0), Metric::INFINITY, now)
            }
            RouteMsgBody::SeqnoRequest { destination, wanted, hop_limit } => {
                self.on_seqno_request(from, destination, wanted, hop_limit, now)
            }
        }
    }

    /// Records a hello. A newly discovered neighbor gets a full table dump.
    pub fn handle_hello(&mut self, from: NodeId, interval_cs: u16, now: f64) -> Vec<Emission> {
        if from == self.id {
            return Vec::new();
        }
        let hold_s = interval_cs.max(1) as f64 / 100.0 * self.config.hold_multiplier as f64;
        let fresh = !self.neighbors.contains_key(&from);
        self.neighbors.insert(from, Neighbor { last_hello: now, hold_s, cost: 1 });
        if fresh {
            self.full_dump()
        } else {
            Vec::new()
        }
    }

    /// Stores an advertisement from neighbor `from` and re-runs selection.
    pub fn handle_update(
        &mut self,
        from: NodeId,
        destination: NodeId,
        seqno: SeqNo,
        metric: Metric,
        now: f64,
    ) -> Vec<Emission> {
        let Some(nb) = self.neighbors.get(&from) else {
            self.ignored_updates += 1;
            return Vec::new();
        };
        if destination == self.id || destination.is_broadcast() {
            return Vec::new();
        }
        let entry = RouteEntry {
            destination,
            advertiser: from,
            metric: metric.plus(nb.cost),
            advertised: metric,
            seqno,
        };
        let table = self.routes.entry(destination).or_default();
        if table.get(&from) == Some(&entry) {
            return Vec::new();
        }
        table.insert(from, entry);
        self.reselect(destination, now)
    }

    /// Drops a neighbor whose hellos stopped and everything learned through it.
    pub fn on_hello_timeout(&mut self, neighbor: NodeId, now: f64) -> Vec<Emission> {
        if self.neighbors.remove(&neighbor).is_none() {
            return Vec::new();
        }
        let affected: Vec<NodeId> = self
            .routes
            .iter_mut()
            .filter_map(|(dest, table)| table.remove(&neighbor).map(|_| *dest))
            .collect();
        affected.into_iter().flat_map(|d| self.reselect(d, now)).collect()
    }

    /// Neighbors whose last hello is older than their hold time.
    pub fn stale_neighbors(&self, now: f64) -> Vec<NodeId> {
        self.neighbors
            .iter()
            .filter(|(_, n)| now - n.last_hello > n.hold_s)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn expire_neighbors(&mut self, now: f64) -> Vec<Emission> {
        self.stale_neighbors(now)
            .into_iter()
            .flat_map(|n| self.on_hello_timeout(n, now))
            .collect()
    }

    /// Answers, forwards or drops a request for a fresh seqno of `destination`.
    pub fn on_seqno_request(
        &mut self,
        from: NodeId,
        destination: NodeId,
        wanted: SeqNo,
        hop_limit: u8,
        now: f64,
    ) -> Vec<Emission> {
        if destination == self.id {
            if wanted.is_newer_than(self.own_seqno) {
                self.own_seqno = self.own_seqno.next();
            }
            return vec![Emission::Broadcast(self.self_update())];
        }
        let Some(sel) = self.selected.get(&destination).copied() else {
            return Vec::new();
        };
        if sel.metric.is_infinite() {
            return Vec::new();
        }
        if !wanted.is_newer_than(sel.seqno) {
            return vec![Emission::Broadcast(RouteMsgBody::update(destination, sel.seqno, sel.metric))];
        }
        if hop_limit <= 1 || sel.advertiser == from {
            return Vec::new();
        }
        let key = (destination, wanted.0);
        if let Some(&t) = self.forwarded_requests.get(&key) {
            if now - t < self.config.update_interval_s {
                return Vec::new();
            }
        }
        self.forwarded_requests.insert(key, now);
        vec![Emission::Unicast {
            to: sel.advertiser,
            body: RouteMsgBody::SeqnoRequest { destination, wanted, hop_limit: hop_limit - 1 },
        }]
    }

    /// Periodic advertisement of self and every finite selected route, plus
    /// renewed seqno requests for destinations the node is starved of.
    pub fn periodic_update(&mut self, now: f64) -> Vec<Emission> {
        self.forwarded_requests
            .retain(|_, t| now - *t < self.config.update_interval_s);
        let mut out = self.full_dump();
        for (dest, sel) in &self.selected {
            let starving = sel.metric.is_infinite()
                && self.entries(*dest).any(|e| !e.metric.is_infinite());
            if starving {
                out.push(Emission::Broadcast(self.request_for(*dest)));
            }
        }
        out
    }

    fn full_dump(&self) -> Vec<Emission> {
        std::iter::once(self.self_update())
            .chain(
                self.selected
                    .values()
                    .filter(|e| !e.metric.is_infinite())
                    .map(|e| RouteMsgBody::update(e.destination, e.seqno, e.metric)),
            )
            .map(Emission::Broadcast)
            .collect()
    }

    fn request_for(&self, dest: NodeId) -> RouteMsgBody {
        let base = self
            .feasibility
            .get(&dest)
            .map(|f| f.seqno)
            .or_else(|| self.selected.get(&dest).map(|e| e.seqno))
            .unwrap_or_default();
        RouteMsgBody::SeqnoRequest {
            destination: dest,
            wanted: base.next(),
            hop_limit: self.config.request_hop_limit,
        }
    }

    fn reselect(&mut self, dest: NodeId, _now: f64) -> Vec<Emission> {
        let fd = self.feasibility.get(&dest).copied();
        let best = self
            .routes
            .get(&dest)
            .into_iter()
            .flat_map(|t| t.values())
            .filter(|e| !e.metric.is_infinite() && feasible(fd, e.seqno, e.advertised))
            .min_by_key(|e| (e.metric, e.advertiser))
            .copied();
        let previous = self.selected.get(&dest).copied();
        match best {
            Some(best) => {
                let next_fd = match fd {
                    Some(f) if f.seqno == best.seqno => FeasibilityDistance {
                        seqno: f.seqno,
                        metric: f.metric.min(best.metric),
                    },
                    _ => FeasibilityDistance { seqno: best.seqno, metric: best.metric },
                };
                self.feasibility.insert(dest, next_fd);
                self.selected.insert(dest, best);
                let changed = previous.is_none_or(|p| {
                    p.advertiser != best.advertiser || p.metric != best.metric || p.seqno != best.seqno
                });
                if changed {
                    vec![Emission::Broadcast(RouteMsgBody::update(dest, best.seqno, best.metric))]
                } else {
                    Vec::new()
                }
            }
            None => match previous {
                Some(p) if !p.metric.is_infinite() => {
                    self.selected.insert(dest, RouteEntry { metric: Metric::INFINITY, ..p });
                    vec![
                        Emission::Broadcast(RouteMsgBody::Retract { destination: dest }),
                        Emission::Broadcast(self.request_for(dest)),
                    ]
                }
                _ => Vec::new(),
            },
        }
    }

    /// Overwrites the selected next hop without any checks. Only for
    /// exercising invariant checkers with a deliberately broken table.
    #[doc(hidden)]
    pub fn force_selected_for_test(&mut self, dest: NodeId, via: NodeId, metric: Metric) {
        self.selected.insert(
            dest,
            RouteEntry { destination: dest, advertiser: via, metric, advertised: metric, seqno: SeqNo(0) },
        );
    }
}

/// Returns the first cycle found in the next-hop graph toward `dest`.
pub fn find_next_hop_cycle<'a, I>(routers: I, dest: NodeId) -> Option<Vec<NodeId>>
where
    I: IntoIterator<Item = &'a RouterState>,
{
    let next: BTreeMap<NodeId, NodeId> = routers
        .into_iter()
        .filter_map(|r| r.next_hop(dest).map(|h| (r.id(), h)))
        .collect();
    for &start in next.keys() {
        let mut path = vec![start];
        let mut cur = start;
        while let Some(&n) = next.get(&cur) {
            if n == dest {
                break;
            }
            if let Some(pos) = path.iter().position(|&p| p == n) {
                return Some(path[pos..].to_vec());
            }
            path.push(n);
            cur = n;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, VecDeque};

    fn n(i: u16) -> NodeId {
        NodeId(i)
    }

    fn router(i: u16) -> RouterState {
        RouterState::new(n(i), RoutingConfig::default())
    }

    #[test]
    fn seqno_wrapping_compare() {
        assert!(SeqNo(1).is_newer_than(SeqNo(0)));
        assert!(SeqNo(0).is_newer_than(SeqNo(0xFFFF)));
        assert!(!SeqNo(0xFFFF).is_newer_than(SeqNo(0)));
        assert!(!SeqNo(5).is_newer_than(SeqNo(5)));
        assert!(!SeqNo(0x8000).is_newer_than(SeqNo(0)));
        assert!(!SeqNo(0).is_newer_than(SeqNo(0x8000)));
    }

    #[test]
    fn feasibility_examples() {
        assert!(feasible(None, SeqNo(9), Metric(40)));
        let rec = Some(FeasibilityDistance { seqno: SeqNo(5), metric: Metric(3) });
        assert!(feasible(rec, SeqNo(5), Metric(2)));
        assert!(!feasible(rec, SeqNo(5), Metric(3)));
        assert!(!feasible(rec, SeqNo(4), Metric(1)));
        assert!(feasible(rec, SeqNo(6), Metric(30)));
        assert!(feasible(rec, SeqNo(1), Metric::INFINITY));
    }

    #[test]
    fn wire_layout_is_fixed() {
        let u = RouteMsgBody::Update { destination: n(0x0102), seqno: SeqNo(0x0304), metric: Metric(0x0506) };
        assert_eq!(u.encode(), [2, 0x02, 0x01, 0x04, 0x03, 0x06, 0x05]);
        let r = RouteMsgBody::Retract { destination: n(7) };
        assert_eq!(r.encode(), [2, 7, 0, 0, 0, 0xFF, 0xFF]);
        assert_eq!(RouteMsgBody::decode(&r.encode()).unwrap(), r);
        assert_eq!(
            RouteMsgBody::decode(&[2, 7, 0, 9, 0, 0xFF, 0xFF]).unwrap(),
            RouteMsgBody::Retract { destination: n(7) }
        );
        assert_eq!(RouteMsgBody::Hello { interval_cs: 400 }.encode(), [1, 0xFF, 0xFF, 0, 0, 0x90, 0x01]);
        assert_eq!(RouteMsgBody::decode(&[9, 0, 0, 0, 0, 0, 0]), Err(WireError::UnknownType(9)));
        assert_eq!(decode_all(&[1, 2, 3]), Err(WireError::Truncated(3)));
    }

    fn any_body() -> impl Strategy<Value = RouteMsgBody> {
        prop_oneof![
            any::<u16>().prop_map(|i| RouteMsgBody::Hello { interval_cs: i }),
            (0u16..0xFFFF, any::<u16>(), 0u16..0xFFFF).prop_map(|(d, s, m)| RouteMsgBody::Update {
                destination: NodeId(d),
                seqno: SeqNo(s),
                metric: Metric(m)
            }),
            (0u16..0xFFFF).prop_map(|d| RouteMsgBody::Retract { destination: NodeId(d) }),
            (0u16..0xFFFF, any::<u16>(), any::<u8>()).prop_map(|(d, s, h)| RouteMsgBody::SeqnoRequest {
                destination: NodeId(d),
                wanted: SeqNo(s),
                hop_limit: h
            }),
        ]
    }

    proptest! {
        #[test]
        fn wire_round_trip(bodies in proptest::collection::vec(any_body(), 0..20)) {
            prop_assert_eq!(decode_all(&encode_all(&bodies)).unwrap(), bodies);
        }

        #[test]
        fn seqno_compare_antisymmetric(a in any::<u16>(), b in any::<u16>()) {
            let (a, b) = (SeqNo(a), SeqNo(b));
            prop_assert!(!(a.is_newer_than(b) && b.is_newer_than(a)));
            let d = a.0.wrapping_sub(b.0);
            if d != 0 && d != 0x8000 {
                prop_assert!(a.is_newer_than(b) ^ b.is_newer_than(a));
            }
        }
    }

    #[test]
    fn first_update_selects_route() {
        let mut a = router(0);
        a.handle_hello(n(1), 400, 0.0);
        let em = a.handle_update(n(1), n(2), SeqNo(1), Metric(1), 0.0);
        let sel = a.selected(n(2)).unwrap();
        assert_eq!((sel.advertiser, sel.metric), (n(1), Metric(2)));
        assert_eq!(
            em,
            vec![Emission::Broadcast(RouteMsgBody::Update { destination: n(2), seqno: SeqNo(1), metric: Metric(2) })]
        );
        assert!(a.handle_update(n(1), n(2), SeqNo(1), Metric(1), 1.0).is_empty());
    }

    #[test]
    fn unknown_neighbor_is_ignored() {
        let mut a = router(0);
        assert!(a.handle_update(n(1), n(2), SeqNo(1), Metric(1), 0.0).is_empty());
        assert!(a.selected(n(2)).is_none());
        assert_eq!(a.ignored_updates(), 1);
    }

    #[test]
    fn tie_breaks_on_lowest_advertiser() {
        let mut a = router(0);
        a.handle_hello(n(5), 400, 0.0);
        a.handle_hello(n(3), 400, 0.0);
        a.handle_update(n(5), n(9), SeqNo(1), Metric(2), 0.0);
        a.handle_update(n(3), n(9), SeqNo(1), Metric(2), 0.0);
        assert_eq!(a.next_hop(n(9)), Some(n(3)));
    }

    #[test]
    fn retraction_with_no_alternative_requests_seqno() {
        // A - B - C, converged at A, then B retracts C.
        let mut a = router(0);
        a.handle_hello(n(1), 400, 0.0);
        a.handle_update(n(1), n(2), SeqNo(4), Metric(1), 0.0);
        let em = a.handle_message(n(1), RouteMsgBody::Retract { destination: n(2) }, 1.0);
        assert_eq!(
            em,
            vec![
                Emission::Broadcast(RouteMsgBody::Retract { destination: n(2) }),
                Emission::Broadcast(RouteMsgBody::SeqnoRequest { destination: n(2), wanted: SeqNo(5), hop_limit: 64 }),
            ]
        );
        assert_eq!(a.next_hop(n(2)), None);
        assert!(a.selected(n(2)).unwrap().metric.is_infinite());
        // Re-advertising the old seqno with a worse metric does not resurrect it.
        assert!(a.handle_update(n(1), n(2), SeqNo(4), Metric(3), 2.0).is_empty());
        assert_eq!(a.next_hop(n(2)), None);
        // A fresh seqno does.
        a.handle_update(n(1), n(2), SeqNo(5), Metric(3), 3.0);
        assert_eq!(a.metric_to(n(2)), Metric(4));
    }

    #[test]
    fn hello_timeout_of_only_next_hop() {
        let mut a = router(0);
        a.handle_hello(n(1), 400, 0.0);
        a.handle_update(n(1), n(9), SeqNo(2), Metric(3), 0.0);
        assert!(a.stale_neighbors(12.0).is_empty());
        assert_eq!(a.stale_neighbors(12.5), vec![n(1)]);
        let em = a.expire_neighbors(12.5);
        assert!(em.contains(&Emission::Broadcast(RouteMsgBody::Retract { destination: n(9) })));
        assert!(em.iter().any(|e| matches!(e.body(), RouteMsgBody::SeqnoRequest { destination, .. } if destination == n(9))));
        assert!(!a.is_neighbor(n(1)));
    }

    #[test]
    fn timeout_of_unused_neighbor_is_silent() {
        let mut a = router(0);
        a.handle_hello(n(1), 400, 0.0);
        a.handle_hello(n(2), 400, 0.0);
        a.handle_update(n(1), n(9), SeqNo(2), Metric(1), 0.0);
        a.handle_update(n(2), n(9), SeqNo(2), Metric(5), 0.0);
        assert!(a.on_hello_timeout(n(2), 20.0).is_empty());
        assert_eq!(a.next_hop(n(9)), Some(n(1)));
    }

    #[test]
    fn seqno_request_for_self_bumps() {
        let mut c = router(2);
        let em = c.on_seqno_request(n(1), n(2), SeqNo(1), 10, 0.0);
        assert_eq!(c.own_seqno(), SeqNo(1));
        assert_eq!(
            em,
            vec![Emission::Broadcast(RouteMsgBody::Update { destination: n(2), seqno: SeqNo(1), metric: Metric(0) })]
        );
        assert!(router(3).on_seqno_request(n(1), n(7), SeqNo(1), 10, 0.0).is_empty());
    }

    #[test]
    fn seqno_request_forwarded_once_per_interval() {
        let mut b = router(1);
        b.handle_hello(n(2), 400, 0.0);
        b.handle_update(n(2), n(2), SeqNo(0), Metric(0), 0.0);
        let em = b.on_seqno_request(n(0), n(2), SeqNo(1), 10, 0.0);
        assert_eq!(
            em,
            vec![Emission::Unicast {
                to: n(2),
                body: RouteMsgBody::SeqnoRequest { destination: n(2), wanted: SeqNo(1), hop_limit: 9 }
            }]
        );
        assert!(b.on_seqno_request(n(0), n(2), SeqNo(1), 10, 1.0).is_empty());
        assert_eq!(b.on_seqno_request(n(0), n(2), SeqNo(1), 10, 20.0).len(), 1);
        assert!(b.on_seqno_request(n(0), n(2), SeqNo(1), 1, 40.0).is_empty());
        // Already fresh enough: answered directly.
        let em = b.on_seqno_request(n(0), n(2), SeqNo(0), 10, 41.0);
        assert!(matches!(em[..], [Emission::Broadcast(RouteMsgBody::Update { .. })]));
    }

    #[test]
    fn isolated_node_dumps_only_itself() {
        let mut a = router(4);
        assert_eq!(
            a.periodic_update(0.0),
            vec![Emission::Broadcast(RouteMsgBody::Update { destination: n(4), seqno: SeqNo(0), metric: Metric(0) })]
        );
    }

    /// Instant, lossless message exchange over an undirected graph. Checks
    /// loop freedom after every single delivery.
    struct Mesh {
        routers: BTreeMap<NodeId, RouterState>,
        adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
        now: f64,
        queue: VecDeque<(NodeId, NodeId, RouteMsgBody)>,
    }

    impl Mesh {
        fn new(n_nodes: u16, edges: &[(u16, u16)]) -> Self {
            let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> = (0..n_nodes).map(|i| (n(i), BTreeSet::new())).collect();
            for &(a, b) in edges {
                adj.get_mut(&n(a)).unwrap().insert(n(b));
                adj.get_mut(&n(b)).unwrap().insert(n(a));
            }
            let routers = (0..n_nodes).map(|i| (n(i), router(i))).collect();
            Mesh { routers, adj, now: 0.0, queue: VecDeque::new() }
        }

        fn enqueue(&mut self, from: NodeId, em: Vec<Emission>) {
            for e in em {
                match e {
                    Emission::Broadcast(b) => {
                        for &to in &self.adj[&from] {
                            self.queue.push_back((from, to, b));
                        }
                    }
                    Emission::Unicast { to, body } => {
                        if self.adj[&from].contains(&to) {
                            self.queue.push_back((from, to, body));
                        }
                    }
                }
            }
        }

        fn drain(&mut self) {
            let mut steps = 0;
            while let Some((from, to, body)) = self.queue.pop_front() {
                let em = self.routers.get_mut(&to).unwrap().handle_message(from, body, self.now);
                self.enqueue(to, em);
                self.assert_loop_free();
                steps += 1;
                assert!(steps < 1_000_000, "message storm");
            }
        }

        fn hellos(&mut self) {
            let ids: Vec<_> = self.routers.keys().copied().collect();
            for id in ids {
                let h = self.routers[&id].hello();
                self.enqueue(id, vec![Emission::Broadcast(h)]);
            }
            self.drain();
        }

        fn round(&mut self) {
            self.now += 4.0;
            self.hellos();
            let ids: Vec<_> = self.routers.keys().copied().collect();
            for id in ids {
                let em = self.routers.get_mut(&id).unwrap().expire_neighbors(self.now);
                self.enqueue(id, em);
            }
            self.drain();
            for id in self.routers.keys().copied().collect::<Vec<_>>() {
                let em = self.routers.get_mut(&id).unwrap().periodic_update(self.now);
                self.enqueue(id, em);
            }
            self.drain();
        }

        fn cut(&mut self, a: u16, b: u16) {
            self.adj.get_mut(&n(a)).unwrap().remove(&n(b));
            self.adj.get_mut(&n(b)).unwrap().remove(&n(a));
        }

        fn assert_loop_free(&self) {
            for &d in self.routers.keys() {
                assert_eq!(find_next_hop_cycle(self.routers.values(), d), None, "loop toward {d}");
            }
        }

        fn bfs(&self, src: NodeId) -> BTreeMap<NodeId, u16> {
            let mut dist = BTreeMap::from([(src, 0u16)]);
            let mut q = VecDeque::from([src]);
            while let Some(u) = q.pop_front() {
                for &v in &self.adj[&u] {
                    if !dist.contains_key(&v) {
                        dist.insert(v, dist[&u] + 1);
                        q.push_back(v);
                    }
                }
            }
            dist
        }

        fn assert_matches_bfs(&self) {
            for &d in self.routers.keys() {
                let dist = self.bfs(d);
                for (&id, r) in &self.routers {
                    let expect = dist.get(&id).map_or(Metric::INFINITY, |&h| Metric(h));
                    assert_eq!(r.metric_to(d), expect, "node {id} toward {d}");
                }
            }
        }
    }

    #[test]
    fn line_converges_to_hop_counts() {
        let mut m = Mesh::new(3, &[(0, 1), (1, 2)]);
        for _ in 0..3 {
            m.round();
        }
        m.assert_matches_bfs();
        assert_eq!(m.routers[&n(0)].next_hop(n(2)), Some(n(1)));
    }

    #[test]
    fn star_center_advertises_every_node() {
        let mut m = Mesh::new(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        for _ in 0..3 {
            m.round();
        }
        let dests: BTreeSet<_> = m
            .routers
            .get_mut(&n(0))
            .unwrap()
            .periodic_update(m.now)
            .iter()
            .filter_map(|e| match e.body() {
                RouteMsgBody::Update { destination, .. } => Some(destination),
                _ => None,
            })
            .collect();
        assert_eq!(dests.len(), 5);
    }

    #[test]
    fn converged_tables_are_a_fixed_point() {
        let mut m = Mesh::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)]);
        for _ in 0..4 {
            m.round();
        }
        let before: Vec<_> = m.routers.values().map(|r| r.selected.clone()).collect();
        m.round();
        let after: Vec<_> = m.routers.values().map(|r| r.selected.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn chain_request_restores_route() {
        // A(0) - B(1) - C(2). A loses its feasible route to C, then asks for a new seqno.
        let mut m = Mesh::new(3, &[(0, 1), (1, 2)]);
        for _ in 0..3 {
            m.round();
        }
        // B's metric to C worsens without a new seqno: infeasible for A.
        let em = m.routers.get_mut(&n(0)).unwrap().handle_update(n(1), n(2), SeqNo(0), Metric(5), m.now);
        assert_eq!(m.routers[&n(0)].next_hop(n(2)), None);
        m.enqueue(n(0), em);
        m.drain();
        assert_eq!(m.routers[&n(2)].own_seqno(), SeqNo(1));
        assert_eq!(m.routers[&n(0)].next_hop(n(2)), Some(n(1)));
        assert_eq!(m.routers[&n(0)].metric_to(n(2)), Metric(2));
    }

    #[test]
    fn link_failure_and_recovery() {
        // Square 0-1-2-3-0 plus tail 3-4.
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (3, 4)];
        let mut m = Mesh::new(5, &edges);
        for _ in 0..4 {
            m.round();
        }
        m.assert_matches_bfs();
        let before: Vec<_> = m.routers.values().map(|r| (0..5).map(|d| r.metric_to(n(d))).collect::<Vec<_>>()).collect();
        m.cut(0, 3);
        for _ in 0..6 {
            m.round();
        }
        m.assert_matches_bfs();
        m.adj.get_mut(&n(0)).unwrap().insert(n(3));
        m.adj.get_mut(&n(3)).unwrap().insert(n(0));
        for _ in 0..6 {
            m.round();
        }
        m.assert_matches_bfs();
        let after: Vec<_> = m.routers.values().map(|r| (0..5).map(|d| r.metric_to(n(d))).collect::<Vec<_>>()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn cycle_detector_negative_control() {
        let mut a = router(0);
        let mut b = router(1);
        a.force_selected_for_test(n(9), n(1), Metric(2));
        b.force_selected_for_test(n(9), n(0), Metric(2));
        assert_eq!(find_next_hop_cycle([&a, &b], n(9)), Some(vec![n(0), n(1)]));
        assert_eq!(find_next_hop_cycle([&a], n(9)), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_graphs_converge_loop_free(
            n_nodes in 2u16..12,
            extra in proptest::collection::vec((0u16..12, 0u16..12), 0..20),
            cuts in proptest::collection::vec((0u16..12, 0u16..12), 0..4),
        ) {
            // Spanning path keeps the graph connected before cuts.
            let mut edges: Vec<(u16, u16)> = (1..n_nodes).map(|i| (i - 1, i)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a < &n_nodes && b < &n_nodes && a != b));
            let mut m = Mesh::new(n_nodes, &edges);
            for _ in 0..(n_nodes as usize + 2) {
                m.round();
            }
            m.assert_matches_bfs();
            for (a, b) in cuts {
                if a < n_nodes && b < n_nodes {
                    m.cut(a, b);
                }
                for _ in 0..(n_nodes as usize + 4) {
                    m.round();
                }
                m.assert_matches_bfs();
            }
        }
    }
}
