//! Provider scoring, request escalation and bandwidth-shared transfer
//! timing.

use std::collections::{BTreeMap, VecDeque};

use num_rational::Ratio;

use crate::domain::SegmentId;
use crate::error::{Error, Result};
use crate::overlay::PeerId;
use crate::strategies::{PrefetchPlan, ScopeHint};
use crate::time::{SimDuration, SimTime};
use crate::topology::NodeId;

/// Per-provider counts of segments received in each of the last `window`
/// periods.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferHistory {
    window: usize,
    period: SimDuration,
    rings: BTreeMap<PeerId, VecDeque<(u64, u64)>>,
}

impl TransferHistory {
    pub fn new(window: usize, period: SimDuration) -> Self {
        assert!(window >= 1 && period.0 > 0);
        TransferHistory { window, period, rings: BTreeMap::new() }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn period_index(&self, now: SimTime) -> u64 {
        now.0 / self.period.0
    }

    /// Notes one segment received from `provider` at `now`.
    pub fn record(&mut self, provider: PeerId, now: SimTime) {
        let p = self.period_index(now);
        let window = self.window as u64;
        let ring = self.rings.entry(provider).or_default();
        match ring.back_mut() {
            Some((idx, count)) if *idx == p => *count += 1,
            _ => ring.push_back((p, 1)),
        }
        while ring.front().is_some_and(|(idx, _)| idx + window <= p) {
            ring.pop_front();
        }
    }

    /// Counts for the last `window` periods ending at `now`, oldest first;
    /// periods with no deliveries count zero.
    pub fn counts(&self, provider: PeerId, now: SimTime) -> Vec<u64> {
        let p = self.period_index(now);
        let first = (p + 1).saturating_sub(self.window as u64);
        let mut out = vec![0; (p + 1 - first) as usize];
        if let Some(ring) = self.rings.get(&provider) {
            for (idx, count) in ring {
                if *idx >= first && *idx <= p {
                    out[(idx - first) as usize] = *count;
                }
            }
        }
        out
    }

    pub fn score(&self, provider: PeerId, now: SimTime) -> Ratio<u64> {
        score_counts(&self.counts(provider, now), self.window)
    }
}

/// Mean of the last `window` period counts; missing periods count zero.
pub fn score_counts(counts: &[u64], window: usize) -> Ratio<u64> {
    assert!(window >= 1, "window must be at least 1");
    let recent = &counts[counts.len().saturating_sub(window)..];
    Ratio::new(recent.iter().sum(), window as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub peer: PeerId,
    pub score: Ratio<u64>,
    pub playhead_distance: u32,
    pub latency: SimDuration,
}

/// Highest score wins; then nearest playhead, lowest latency, lowest id.
pub fn choose_provider(candidates: &[Candidate]) -> Result<PeerId> {
    candidates
        .iter()
        .min_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then(a.playhead_distance.cmp(&b.playhead_distance))
                .then(a.latency.cmp(&b.latency))
                .then(a.peer.cmp(&b.peer))
        })
        .map(|c| c.peer)
        .ok_or(Error::NoProvider)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentRequest {
    pub requester: PeerId,
    pub segment: SegmentId,
    pub issued_at: SimTime,
    pub scope: ScopeHint,
    pub deadline: SimTime,
}

impl SegmentRequest {
    pub fn new(requester: PeerId, segment: SegmentId, issued_at: SimTime, scope: ScopeHint, timeout: SimDuration) -> Self {
        assert!(timeout.0 > 0, "request timeout must be positive");
        SegmentRequest { requester, segment, issued_at, scope, deadline: issued_at + timeout }
    }

    /// The same request re-sent one scope further out, or `None` once the
    /// server has been asked.
    pub fn escalate(&self, now: SimTime, timeout: SimDuration) -> Option<SegmentRequest> {
        let scope = match self.scope {
            ScopeHint::Session => ScopeHint::Shortcut,
            ScopeHint::Shortcut => ScopeHint::Server,
            ScopeHint::Server => return None,
        };
        Some(SegmentRequest::new(self.requester, self.segment, now, scope, timeout))
    }
}

/// What the requester knows about where a segment lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Known {
    InSession,
    Remote,
    Nowhere,
}

/// Turns a plan into first-attempt requests: session copies first, then
/// shortcut neighbours, otherwise straight to the server.
pub fn execute_prefetch(
    requester: PeerId,
    plan: &PrefetchPlan,
    now: SimTime,
    timeout: SimDuration,
    mut locate: impl FnMut(SegmentId) -> Known,
) -> Vec<SegmentRequest> {
    plan.segments()
        .map(|segment| {
            let scope = match locate(segment) {
                Known::InSession => ScopeHint::Session,
                Known::Remote => ScopeHint::Shortcut,
                Known::Nowhere => ScopeHint::Server,
            };
            SegmentRequest::new(requester, segment, now, scope, timeout)
        })
        .collect()
}

/// Seconds to move `segment_bits` when each endpoint splits its capacity
/// evenly over its concurrent flows.
pub fn transfer_time(segment_bits: u64, provider_up_bps: f64, requester_down_bps: f64, up_flows: u32, down_flows: u32) -> f64 {
    assert!(provider_up_bps > 0.0 && requester_down_bps > 0.0 && up_flows > 0 && down_flows > 0);
    let rate = (provider_up_bps / up_flows as f64).min(requester_down_bps / down_flows as f64);
    segment_bits as f64 / rate
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeekKind {
    RelativeHit,
    GlobalHit,
    ShortcutFetch,
    ServerFetch,
}

impl SeekKind {
    pub fn name(self) -> &'static str {
        match self {
            SeekKind::RelativeHit => "RELATIVE_HIT",
            SeekKind::GlobalHit => "GLOBAL_HIT",
            SeekKind::ShortcutFetch => "SHORTCUT_FETCH",
            SeekKind::ServerFetch => "SERVER_FETCH",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeekOutcome {
    pub kind: SeekKind,
    pub latency: SimDuration,
}

/// Which tier a seek is served from: own cache, a session mate, a shortcut
/// neighbour, or the server.
pub fn classify_seek(resident: bool, in_session: bool, at_shortcut: bool) -> SeekKind {
    if resident {
        SeekKind::RelativeHit
    } else if in_session {
        SeekKind::GlobalHit
    } else if at_shortcut {
        SeekKind::ShortcutFetch
    } else {
        SeekKind::ServerFetch
    }
}

/// Max-min fair rates for flows given as `(src, dst)` pairs, where each
/// flow consumes `up(src)` and `down(dst)` capacity. Progressive filling:
/// repeatedly saturate the endpoint with the smallest equal share.
pub fn max_min_rates(flows: &[(NodeId, NodeId)], up: impl Fn(NodeId) -> f64, down: impl Fn(NodeId) -> f64) -> Vec<f64> {
    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum Port {
        Up(NodeId),
        Down(NodeId),
    }
    let mut ports: BTreeMap<Port, Vec<usize>> = BTreeMap::new();
    for (i, (s, d)) in flows.iter().enumerate() {
        ports.entry(Port::Up(*s)).or_default().push(i);
        ports.entry(Port::Down(*d)).or_default().push(i);
    }
    let cap = |p: Port| match p {
        Port::Up(n) => up(n),
        Port::Down(n) => down(n),
    };
    let mut rate: Vec<Option<f64>> = vec![None; flows.len()];
    let mut left = flows.len();
    while left > 0 {
        let mut best: Option<(f64, Port)> = None;
        for (port, members) in &ports {
            let open = members.iter().filter(|i| rate[**i].is_none()).count();
            if open == 0 {
                continue;
            }
            let used: f64 = members.iter().filter_map(|i| rate[*i]).sum();
            let share = ((cap(*port) - used) / open as f64).max(0.0);
            if best.is_none_or(|(b, _)| share < b) {
                best = Some((share, *port));
            }
        }
        let (share, port) = best.expect("open flows imply an open port");
        for i in &ports[&port] {
            if rate[*i].is_none() {
                rate[*i] = Some(share);
                left -= 1;
            }
        }
    }
    rate.into_iter().map(|r| r.unwrap()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u64);

/// Priority flows are served first; background flows share what is left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Priority,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
struct Flow {
    src: NodeId,
    dst: NodeId,
    class: Class,
    remaining_bits: f64,
    rate: f64,
    version: u64,
}

/// A new expected completion time for a flow. Older ones for the same flow
/// are superseded and carry a smaller `version`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reschedule {
    pub flow: FlowId,
    pub version: u64,
    pub at: SimTime,
}

/// Fluid model of every in-flight transfer. Within a class rates are
/// max-min fair over endpoint capacities; they are recomputed whenever a
/// flow starts or ends.
#[derive(Clone, Debug)]
pub struct FlowNet {
    up: BTreeMap<NodeId, f64>,
    down: BTreeMap<NodeId, f64>,
    flows: BTreeMap<FlowId, Flow>,
    clock: SimTime,
    next_id: u64,
}

impl FlowNet {
    /// `links` gives `(node, up_bps, down_bps)`; use `f64::INFINITY` for an
    /// unconstrained direction.
    pub fn new(links: impl IntoIterator<Item = (NodeId, f64, f64)>) -> Self {
        let mut up = BTreeMap::new();
        let mut down = BTreeMap::new();
        for (n, u, d) in links {
            up.insert(n, u);
            down.insert(n, d);
        }
        FlowNet { up, down, flows: BTreeMap::new(), clock: SimTime::ZERO, next_id: 0 }
    }

    pub fn active(&self) -> usize {
        self.flows.len()
    }

    pub fn rate(&self, id: FlowId) -> Option<f64> {
        self.flows.get(&id).map(|f| f.rate)
    }

    /// Current `(src, dst, rate)` of every flow.
    pub fn snapshot(&self) -> Vec<(NodeId, NodeId, f64)> {
        self.flows.values().map(|f| (f.src, f.dst, f.rate)).collect()
    }

    pub fn uploads(&self, node: NodeId) -> usize {
        self.flows.values().filter(|f| f.src == node).count()
    }

    fn advance(&mut self, now: SimTime) {
        assert!(now >= self.clock, "flow network clock moved backwards");
        let dt = (now - self.clock).as_secs_f64();
        if dt > 0.0 {
            for f in self.flows.values_mut() {
                f.remaining_bits = (f.remaining_bits - f.rate * dt).max(0.0);
            }
        }
        self.clock = now;
    }

    fn rebalance(&mut self, now: SimTime) -> Vec<Reschedule> {
        let mut up_used: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut down_used: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut rates: BTreeMap<FlowId, f64> = BTreeMap::new();
        for class in [Class::Priority, Class::Background] {
            let ids: Vec<FlowId> = self.flows.iter().filter(|(_, f)| f.class == class).map(|(id, _)| *id).collect();
            let pairs: Vec<(NodeId, NodeId)> = ids.iter().map(|id| (self.flows[id].src, self.flows[id].dst)).collect();
            let left = |cap: &BTreeMap<NodeId, f64>, used: &BTreeMap<NodeId, f64>, n: NodeId| {
                (cap.get(&n).copied().unwrap_or(f64::INFINITY) - used.get(&n).copied().unwrap_or(0.0)).max(0.0)
            };
            let r = max_min_rates(&pairs, |n| left(&self.up, &up_used, n), |n| left(&self.down, &down_used, n));
            for ((id, (s, d)), r) in ids.into_iter().zip(pairs).zip(r) {
                *up_used.entry(s).or_default() += r;
                *down_used.entry(d).or_default() += r;
                rates.insert(id, r);
            }
        }
        let mut out = Vec::new();
        for (id, f) in self.flows.iter_mut() {
            let r = rates[id];
            if f.rate != r {
                f.rate = r;
                f.version += 1;
                // a starved flow waits for the next rebalance
                if r > 0.0 {
                    let at = now + SimDuration::from_secs_f64_ceil(f.remaining_bits / r);
                    out.push(Reschedule { flow: *id, version: f.version, at });
                }
            }
        }
        out
    }

    /// Starts moving `bits` from `src` to `dst` at `now`.
    pub fn start(&mut self, now: SimTime, src: NodeId, dst: NodeId, bits: f64, class: Class) -> (FlowId, Vec<Reschedule>) {
        self.advance(now);
        let id = FlowId(self.next_id);
        self.next_id += 1;
        self.flows.insert(id, Flow { src, dst, class, remaining_bits: bits, rate: 0.0, version: 0 });
        (id, self.rebalance(now))
    }

    /// Completes `id` if `version` is its current schedule. Returns the
    /// flow's endpoints and the rescheduled survivors, or `None` for a
    /// superseded completion.
    pub fn finish(&mut self, now: SimTime, id: FlowId, version: u64) -> Option<((NodeId, NodeId), Vec<Reschedule>)> {
        if self.flows.get(&id)?.version != version {
            return None;
        }
        self.advance(now);
        let f = self.flows.remove(&id).unwrap();
        Some(((f.src, f.dst), self.rebalance(now)))
    }

    /// Drops every flow into `dst`, e.g. when the receiver leaves.
    pub fn cancel_into(&mut self, now: SimTime, dst: NodeId) -> (Vec<FlowId>, Vec<Reschedule>) {
        let gone: Vec<FlowId> = self.flows.iter().filter(|(_, f)| f.dst == dst).map(|(id, _)| *id).collect();
        let r = self.cancel(now, &gone);
        (gone, r)
    }

    /// Drops the given flows; unknown ids are ignored.
    pub fn cancel(&mut self, now: SimTime, ids: &[FlowId]) -> Vec<Reschedule> {
        self.advance(now);
        let mut any = false;
        for id in ids {
            any |= self.flows.remove(id).is_some();
        }
        if any { self.rebalance(now) } else { Vec::new() }
    }
}
