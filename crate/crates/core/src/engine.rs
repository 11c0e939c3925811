//! The discrete-event loop tying peers, overlay, strategies and transfers
//! together.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::domain::{seek_targets, BufferCache, Origin, PlaybackRecord, SegmentId, Video};
use crate::error::{Error, Result};
use crate::gossip::{emit_gossip, GossipBus, StateTable};
use crate::metrics::{MetricsLedger, MetricsReport, SeekRecord};
use crate::overlay::{Overlay, Parent, PeerId};
use crate::seeds::{self, SimRng};
use crate::strategies::{
    mine_update_from, plan_cooperative, plan_mining, plan_none, plan_popularity, plan_random, MiningModel, PeerView,
    PopularityList, PrefetchPlan, ScopeHint, Strategy, Tracker,
};
use crate::time::{SimDuration, SimTime};
use crate::topology::{generate_topology, NetworkTopology, NodeId};
use crate::transfer::{
    choose_provider, classify_seek, execute_prefetch, Candidate, Class, FlowId, FlowNet, Known, Reschedule, SeekKind,
    TransferHistory,
};
use crate::workload::{generate_traces, TraceKind, ViewerTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    Arrival(PeerId),
    PlaybackTick(PeerId, u64),
    GossipTick(PeerId),
    PlanTick(PeerId),
    Trace(PeerId, usize),
    RequestTimeout(u64),
    /// A request reaches its provider, which starts sending.
    FetchStart(u64),
    TransferComplete(FlowId, u64),
    /// The last bit reaches the requester.
    Deliver(u64),
    TrackerTick(PeerId),
    MiningTick(PeerId),
    ShortcutTick(PeerId),
    End,
}

#[derive(Debug)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so the max-heap pops the earliest `(time, seq)`.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Provider {
    Peer(PeerId),
    Server,
}

#[derive(Clone, Copy, Debug)]
enum Purpose {
    Seek { id: u64, kind: SeekKind, issued: SimTime },
    Prefetch { scope: ScopeHint, urgent: bool },
}

#[derive(Clone, Debug)]
struct Transfer {
    requester: PeerId,
    provider: Option<Provider>,
    segment: SegmentId,
    purpose: Purpose,
    answered: bool,
}

#[derive(Clone, Copy, Debug)]
struct PendingSeek {
    id: u64,
}

#[derive(Debug)]
struct Peer {
    live: bool,
    cache: BufferCache,
    /// Next segment to play.
    playhead: SegmentId,
    paused: bool,
    tick_epoch: u64,
    seeking: Option<PendingSeek>,
    seek_counter: u64,
    record: PlaybackRecord,
    queue: VecDeque<(SegmentId, bool)>,
    inflight: BTreeMap<SegmentId, u64>,
    table: StateTable,
    history: TransferHistory,
    popularity: PopularityList,
    mining: MiningModel,
    mined_upto: BTreeMap<PeerId, usize>,
    reported_upto: usize,
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub ledger: MetricsLedger,
    /// Human-readable event log; empty unless requested.
    pub timeline: Vec<String>,
    pub gossip_messages: u64,
    pub events: u64,
}

fn gossips(s: Strategy) -> bool {
    matches!(s, Strategy::Popularity | Strategy::Mining | Strategy::Cooperative)
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    video: Video,
    topo: &'a NetworkTopology,
    traces: &'a [ViewerTrace],
    overlay: Overlay,
    peers: BTreeMap<PeerId, Peer>,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: SimTime,
    net: FlowNet,
    transfers: BTreeMap<u64, Transfer>,
    flows: BTreeMap<FlowId, u64>,
    next_transfer: u64,
    tracker: Tracker,
    bus: GossipBus,
    ledger: MetricsLedger,
    plan_rng: SimRng,
    overlay_rng: SimRng,
    timeline: Option<Vec<String>>,
    urgent_window: u32,
    timeout: SimDuration,
    events: u64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a RunConfig, topo: &'a NetworkTopology, traces: &'a [ViewerTrace], timeline: bool) -> Self {
        let links = topo.nodes().map(|(n, l)| {
            let down = if n == NodeId::SERVER { f64::INFINITY } else { l.down_bps as f64 };
            (n, l.up_bps as f64, down)
        });
        Sim {
            cfg,
            video: cfg.video.clone(),
            topo,
            traces,
            overlay: Overlay::new(SimDuration::from_secs(cfg.session_width_s as u64), cfg.tree_fanout),
            peers: BTreeMap::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            net: FlowNet::new(links),
            transfers: BTreeMap::new(),
            flows: BTreeMap::new(),
            next_transfer: 0,
            tracker: Tracker::new(),
            bus: GossipBus::default(),
            ledger: MetricsLedger::new(),
            plan_rng: seeds::substream(cfg.seed, "strategy"),
            overlay_rng: seeds::substream(cfg.seed, "overlay"),
            timeline: timeline.then(Vec::new),
            urgent_window: cfg.urgent_window_segments(),
            timeout: cfg.params.request_timeout(),
            events: 0,
        }
    }

    fn at(&mut self, time: SimTime, kind: EventKind) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.queue.push(Event { time, seq: self.seq, kind });
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(t) = &mut self.timeline {
            let text = line();
            t.push(format!("{} {}", self.now, text));
        }
    }

    fn strategy(&self) -> Strategy {
        self.cfg.strategy
    }

    fn secs(s: u32) -> SimDuration {
        SimDuration::from_secs(s as u64)
    }

    fn one_way(&self, a: NodeId, b: NodeId) -> SimDuration {
        self.topo.path_latency(a, b).expect("endpoints exist")
    }

    fn node_of(&self, p: Provider) -> NodeId {
        match p {
            Provider::Peer(k) => k.node(),
            Provider::Server => NodeId::SERVER,
        }
    }

    fn is_live(&self, p: PeerId) -> bool {
        self.peers.get(&p).is_some_and(|x| x.live)
    }

    fn run(mut self) -> Result<RunOutput> {
        for tr in self.traces {
            self.at(tr.arrival, EventKind::Arrival(tr.peer));
        }
        let end = SimTime::from_secs_f64(self.cfg.duration_s);
        self.at(end, EventKind::End);
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.time >= self.now, "clock moved backwards");
            self.now = ev.time;
            self.events += 1;
            if ev.kind == EventKind::End {
                self.drop_transfers(|_| true);
                break;
            }
            self.dispatch(ev.kind);
        }
        let report = MetricsReport::from_ledger(self.cfg.strategy, self.cfg.seed, &self.ledger);
        Ok(RunOutput {
            report,
            ledger: self.ledger,
            timeline: self.timeline.unwrap_or_default(),
            gossip_messages: self.bus.messages,
            events: self.events,
        })
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Arrival(p) => self.on_arrival(p),
            EventKind::PlaybackTick(p, epoch) => self.on_tick(p, epoch),
            EventKind::GossipTick(p) => self.on_gossip(p),
            EventKind::PlanTick(p) => self.on_plan(p),
            EventKind::Trace(p, i) => self.on_trace(p, i),
            EventKind::RequestTimeout(t) => self.on_timeout(t),
            EventKind::FetchStart(t) => self.on_fetch_start(t),
            EventKind::TransferComplete(f, v) => self.on_transfer_complete(f, v),
            EventKind::Deliver(t) => self.on_deliver(t),
            EventKind::TrackerTick(p) => self.on_tracker(p),
            EventKind::MiningTick(p) => self.on_mining(p),
            EventKind::ShortcutTick(p) => self.on_shortcut(p),
            EventKind::End => {}
        }
    }

    fn on_arrival(&mut self, p: PeerId) {
        let session = self.overlay.assign_session(p, self.now, self.topo).expect("peer endpoint exists").id;
        let params = &self.cfg.params;
        self.peers.insert(
            p,
            Peer {
                live: true,
                cache: BufferCache::new(params.cache_capacity),
                playhead: SegmentId(0),
                paused: false,
                tick_epoch: 0,
                seeking: None,
                seek_counter: 0,
                record: PlaybackRecord::new(),
                queue: VecDeque::new(),
                inflight: BTreeMap::new(),
                table: StateTable::new(),
                history: TransferHistory::new(params.score_window, Self::secs(params.score_period_s)),
                popularity: PopularityList::default(),
                mining: MiningModel::new(params.support_threshold),
                mined_upto: BTreeMap::new(),
                reported_upto: 0,
            },
        );
        self.ledger.add_peer(p, self.now);
        self.log(|| format!("ARRIVE peer={p} session={}", session.0));
        let trace = &self.traces[p.0 as usize];
        for (i, e) in trace.events.iter().enumerate() {
            self.queue.push(Event { time: e.time, seq: self.seq + 1 + i as u64, kind: EventKind::Trace(p, i) });
        }
        self.seq += trace.events.len() as u64;
        self.schedule_tick(p, self.now);
        self.at(self.now, EventKind::ShortcutTick(p));
        self.at(self.now, EventKind::GossipTick(p));
        let now = self.now;
        match self.strategy() {
            Strategy::Popularity => self.at(now + Self::secs(params.tracker_period_s), EventKind::TrackerTick(p)),
            Strategy::Mining => self.at(now + Self::secs(params.mining_period_s), EventKind::MiningTick(p)),
            _ => {}
        }
    }

    fn schedule_tick(&mut self, p: PeerId, at: SimTime) {
        let peer = self.peers.get_mut(&p).unwrap();
        peer.tick_epoch += 1;
        let epoch = peer.tick_epoch;
        self.at(at, EventKind::PlaybackTick(p, epoch));
    }

    fn stop_ticks(&mut self, p: PeerId) {
        self.peers.get_mut(&p).unwrap().tick_epoch += 1;
    }

    fn on_tick(&mut self, p: PeerId, epoch: u64) {
        let n = self.video.segment_count;
        let bits = self.video.segment_bits();
        let stream_window = if self.strategy().prefetches() { self.urgent_window.max(1) } else { 1 };
        let from_server = self.overlay.parent(p) == Some(Parent::Server);
        let now = self.now;
        let ttl = Self::secs(self.cfg.params.prefetch_ttl_s);
        let peer = self.peers.get_mut(&p).unwrap();
        if !peer.live || peer.tick_epoch != epoch || peer.paused || peer.seeking.is_some() {
            return;
        }
        if peer.playhead.0 >= n {
            self.depart(p);
            return;
        }
        // the session stream keeps the window ahead of the playhead topped up
        let hi = peer.playhead.0.saturating_add(stream_window).min(n);
        if let Some(s) = (peer.playhead.0..hi).map(SegmentId).find(|s| !peer.cache.contains(*s)) {
            let playhead = peer.playhead;
            peer.cache.insert(s, Origin::LocalStream, now, playhead);
            if from_server {
                self.ledger.server_bits += bits;
            }
        }
        let seg = peer.playhead;
        if let Some(before) = peer.cache.consume(seg) {
            if before.origin.is_prefetch() && !before.consumed {
                self.ledger.record_prefetch_played(p);
            }
        }
        peer.record.push(seg);
        peer.playhead = SegmentId(seg.0 + 1);
        peer.cache.expire(now, ttl);
        debug_assert!(peer.cache.len() <= peer.cache.capacity());
        let next = now + self.video.segment_duration();
        self.at(next, EventKind::PlaybackTick(p, epoch));
    }

    fn on_trace(&mut self, p: PeerId, i: usize) {
        if !self.is_live(p) {
            return;
        }
        match self.traces[p.0 as usize].events[i].kind {
            TraceKind::Seek(target) => self.on_seek(p, target),
            TraceKind::Pause => {
                self.log(|| format!("PAUSE peer={p}"));
                self.peers.get_mut(&p).unwrap().paused = true;
                self.stop_ticks(p);
            }
            TraceKind::Resume => {
                self.log(|| format!("RESUME peer={p}"));
                let peer = self.peers.get_mut(&p).unwrap();
                if peer.paused {
                    peer.paused = false;
                    if peer.seeking.is_none() {
                        self.schedule_tick(p, self.now);
                    }
                }
            }
            TraceKind::Leave => self.depart(p),
        }
    }

    fn candidates(&self, p: PeerId, holders: &[PeerId]) -> Vec<Candidate> {
        let peer = &self.peers[&p];
        holders
            .iter()
            .map(|k| Candidate {
                peer: *k,
                score: peer.history.score(*k, self.now),
                playhead_distance: self.peers[k].playhead.distance(peer.playhead),
                latency: self.one_way(p.node(), k.node()),
            })
            .collect()
    }

    fn live_holders(&self, among: impl IntoIterator<Item = PeerId>, seg: SegmentId) -> Vec<PeerId> {
        among.into_iter().filter(|k| self.peers.get(k).is_some_and(|x| x.live && x.cache.contains(seg))).collect()
    }

    fn on_seek(&mut self, p: PeerId, target: SegmentId) {
        self.log(|| format!("SEEK peer={p} target={target}"));
        self.ledger.record_seek_issued(p);
        let now = self.now;
        let prefetches = self.strategy().prefetches();
        let peer = self.peers.get_mut(&p).unwrap();
        peer.seek_counter += 1;
        let id = peer.seek_counter;
        let resident = prefetches && peer.cache.contains(target);
        if resident {
            let rec = SeekRecord { peer: p, issued: now, target, kind: SeekKind::RelativeHit, latency: SimDuration::ZERO };
            self.finish_seek(rec, true);
            return;
        }
        let mates: Vec<PeerId> = self.overlay.session_mates(p).collect();
        let in_session = self.live_holders(mates, target);
        let shortcuts = self.overlay.shortcuts(p);
        let at_shortcut = self.live_holders(shortcuts.iter().copied(), target);
        let kind = classify_seek(false, !in_session.is_empty(), !at_shortcut.is_empty());
        let (provider, wait, msgs) = match kind {
            SeekKind::GlobalHit => {
                let k = choose_provider(&self.candidates(p, &in_session)).expect("holders exist");
                (Provider::Peer(k), SimDuration::ZERO, 2)
            }
            SeekKind::ShortcutFetch => {
                let k = choose_provider(&self.candidates(p, &at_shortcut)).expect("holders exist");
                (Provider::Peer(k), SimDuration::ZERO, shortcuts.len() as u64 + 1)
            }
            _ => {
                // shortcut neighbours stay silent; the server is asked once they time out
                let wait = if shortcuts.is_empty() { SimDuration::ZERO } else { self.timeout };
                (Provider::Server, wait, shortcuts.len() as u64 + 2)
            }
        };
        self.ledger.add_requests(p, msgs);
        self.abort_prefetches(p);
        let peer = self.peers.get_mut(&p).unwrap();
        peer.seeking = Some(PendingSeek { id });
        self.stop_ticks(p);
        let t = self.new_transfer(Transfer {
            requester: p,
            provider: Some(provider),
            segment: target,
            purpose: Purpose::Seek { id, kind, issued: now },
            answered: true,
        });
        let arrive = now + wait + self.one_way(p.node(), self.node_of(provider));
        self.at(arrive, EventKind::FetchStart(t));
    }

    /// Records a completed seek and, if it is the latest one, moves the
    /// playhead to its target.
    fn finish_seek(&mut self, rec: SeekRecord, latest: bool) {
        let p = rec.peer;
        self.log(|| {
            format!("OUTCOME peer={p} target={} kind={} latency_ms={:.3}", rec.target, rec.kind.name(), rec.latency.as_millis_f64())
        });
        self.ledger.record_seek(rec);
        self.ledger.add_stall(p, rec.latency);
        if !latest {
            return;
        }
        let peer = self.peers.get_mut(&p).unwrap();
        peer.seeking = None;
        peer.playhead = rec.target;
        if !peer.paused {
            self.schedule_tick(p, self.now);
        }
        self.at(self.now, EventKind::PlanTick(p));
    }

    /// Frees the peer's downlink for a seek: queued and in-flight
    /// prefetches are abandoned.
    fn abort_prefetches(&mut self, p: PeerId) {
        let peer = self.peers.get_mut(&p).unwrap();
        peer.queue.clear();
        let dropped: Vec<u64> = std::mem::take(&mut peer.inflight).into_values().collect();
        let mut flows = Vec::new();
        for t in dropped {
            self.transfers.remove(&t);
            flows.extend(self.flows.iter().filter(|(_, v)| **v == t).map(|(f, _)| *f));
        }
        for f in &flows {
            self.flows.remove(f);
        }
        let rs = self.net.cancel(self.now, &flows);
        self.push_reschedules(rs);
    }

    fn new_transfer(&mut self, t: Transfer) -> u64 {
        let id = self.next_transfer;
        self.next_transfer += 1;
        self.transfers.insert(id, t);
        id
    }

    fn push_reschedules(&mut self, rs: Vec<Reschedule>) {
        for r in rs {
            self.at(r.at, EventKind::TransferComplete(r.flow, r.version));
        }
    }

    fn on_fetch_start(&mut self, t: u64) {
        let Some(tr) = self.transfers.get(&t).cloned() else { return };
        if !self.is_live(tr.requester) {
            self.transfers.remove(&t);
            return;
        }
        let provider = tr.provider.expect("fetch has a provider");
        if let (Purpose::Prefetch { .. }, Provider::Peer(k)) = (tr.purpose, provider) {
            // a peer that left or no longer holds the segment stays silent
            if !self.peers.get(&k).is_some_and(|x| x.live && x.cache.contains(tr.segment)) {
                return;
            }
        }
        self.transfers.get_mut(&t).unwrap().answered = true;
        let bits = self.video.segment_bits() as f64;
        let class = match tr.purpose {
            Purpose::Seek { .. } => Class::Priority,
            Purpose::Prefetch { .. } => Class::Background,
        };
        let (flow, rs) = self.net.start(self.now, self.node_of(provider), tr.requester.node(), bits, class);
        self.flows.insert(flow, t);
        self.push_reschedules(rs);
    }

    fn on_transfer_complete(&mut self, flow: FlowId, version: u64) {
        let Some((_, rs)) = self.net.finish(self.now, flow, version) else { return };
        self.push_reschedules(rs);
        let t = self.flows.remove(&flow).expect("flow belongs to a transfer");
        let tr = &self.transfers[&t];
        let latency = self.one_way(self.node_of(tr.provider.unwrap()), tr.requester.node());
        self.at(self.now + latency, EventKind::Deliver(t));
    }

    fn on_deliver(&mut self, t: u64) {
        let Some(tr) = self.transfers.remove(&t) else { return };
        let p = tr.requester;
        if !self.is_live(p) {
            return;
        }
        let provider = tr.provider.unwrap();
        if provider == Provider::Server {
            self.ledger.server_bits += self.video.segment_bits();
        }
        let now = self.now;
        let peer = self.peers.get_mut(&p).unwrap();
        if let Provider::Peer(k) = provider {
            peer.history.record(k, now);
        }
        match tr.purpose {
            Purpose::Seek { id, kind, issued } => {
                let playhead = peer.playhead;
                peer.cache.insert(tr.segment, Origin::LocalStream, now, playhead);
                let latest = peer.seeking.is_some_and(|s| s.id == id);
                let rec = SeekRecord { peer: p, issued, target: tr.segment, kind, latency: now - issued };
                self.finish_seek(rec, latest);
            }
            Purpose::Prefetch { scope, urgent } => {
                if peer.inflight.get(&tr.segment) == Some(&t) {
                    peer.inflight.remove(&tr.segment);
                }
                self.ledger.add_requests(p, 1);
                let origin = match (urgent, scope) {
                    (true, _) => Origin::LocalStream,
                    (false, ScopeHint::Session) => Origin::PrefetchPeer,
                    (false, ScopeHint::Shortcut) => Origin::PrefetchShortcut,
                    (false, ScopeHint::Server) => Origin::Server,
                };
                let peer = self.peers.get_mut(&p).unwrap();
                if !peer.cache.contains(tr.segment) {
                    let playhead = peer.playhead;
                    peer.cache.insert(tr.segment, origin, now, playhead);
                    if origin.is_prefetch() && peer.cache.contains(tr.segment) {
                        self.ledger.record_prefetched(p);
                    }
                }
                self.pump(p);
            }
        }
    }

    fn on_gossip(&mut self, p: PeerId) {
        if !self.is_live(p) {
            return;
        }
        let period = Self::secs(self.cfg.params.gossip_period_s);
        if gossips(self.strategy()) {
            let peer = &self.peers[&p];
            let msg = emit_gossip(p, &peer.cache, peer.playhead, self.now);
            let mates: BTreeSet<PeerId> = self.overlay.session_mates(p).collect();
            let sent = self.bus.broadcast(&msg, self.peers.iter_mut().filter(|(k, _)| mates.contains(k)).map(|(_, x)| &mut x.table));
            self.ledger.add_control(p, sent);
            let max_age = SimDuration(period.0 * self.cfg.params.stale_periods as u64);
            let now = self.now;
            let peer = self.peers.get_mut(&p).unwrap();
            peer.table.drop_stale(now, max_age);
            peer.table.retain_peers(|k| mates.contains(&k));
        }
        self.on_plan(p);
        self.at(self.now + period, EventKind::GossipTick(p));
    }

    fn plan(&mut self, p: PeerId) -> PrefetchPlan {
        let params = &self.cfg.params;
        let peer = &self.peers[&p];
        let pending: BTreeSet<SegmentId> = peer.inflight.keys().copied().collect();
        let view = PeerView {
            video: &self.video,
            playhead: peer.playhead,
            cache: &peer.cache,
            pending: &pending,
            urgent_window: self.urgent_window,
        };
        match self.cfg.strategy {
            Strategy::None => plan_none(&view),
            Strategy::Random => plan_random(&view, params.budget, &mut self.plan_rng),
            Strategy::Popularity => plan_popularity(&view, &peer.popularity, params.budget),
            Strategy::Mining => plan_mining(&view, &peer.mining, params.budget),
            Strategy::Cooperative => plan_cooperative(&view, &peer.table, params.horizon, params.budget),
        }
    }

    fn on_plan(&mut self, p: PeerId) {
        if !self.is_live(p) || self.peers[&p].seeking.is_some() {
            return;
        }
        let plan = self.plan(p);
        let peer = self.peers.get_mut(&p).unwrap();
        peer.queue = plan.urgent.iter().map(|s| (*s, true)).chain(plan.targets.iter().map(|t| (t.segment, false))).collect();
        self.pump(p);
    }

    /// Where the requester believes `seg` can be found.
    fn locate(&mut self, p: PeerId, seg: SegmentId) -> Known {
        if !gossips(self.strategy()) {
            return Known::InSession;
        }
        let mates: BTreeSet<PeerId> = self.overlay.session_mates(p).collect();
        if self.peers[&p].table.holders(seg).iter().any(|k| mates.contains(k)) {
            Known::InSession
        } else if !self.overlay.shortcuts(p).is_empty() {
            Known::Remote
        } else {
            Known::Nowhere
        }
    }

    /// Issues queued requests while the peer has free request slots.
    fn pump(&mut self, p: PeerId) {
        let max = self.cfg.params.max_inflight;
        loop {
            let peer = self.peers.get_mut(&p).unwrap();
            if peer.inflight.len() >= max {
                return;
            }
            let Some((seg, urgent)) = peer.queue.pop_front() else { return };
            if peer.cache.contains(seg) || peer.inflight.contains_key(&seg) {
                continue;
            }
            let plan = PrefetchPlan { urgent: vec![seg], targets: Vec::new() };
            let known = self.locate(p, seg);
            let req = execute_prefetch(p, &plan, self.now, self.timeout, |_| known)[0];
            let t = self.new_transfer(Transfer {
                requester: p,
                provider: None,
                segment: seg,
                purpose: Purpose::Prefetch { scope: req.scope, urgent },
                answered: false,
            });
            self.peers.get_mut(&p).unwrap().inflight.insert(seg, t);
            self.send_request(t);
        }
    }

    /// Routes transfer `t` to a provider for its current scope.
    fn send_request(&mut self, t: u64) {
        let tr = self.transfers[&t].clone();
        let Purpose::Prefetch { scope, urgent } = tr.purpose else { unreachable!() };
        let p = tr.requester;
        let seg = tr.segment;
        let (provider, msgs) = match scope {
            ScopeHint::Session => {
                let mates: Vec<PeerId> = self.overlay.session_mates(p).collect();
                let pick = if gossips(self.strategy()) {
                    let known: BTreeSet<PeerId> = self.peers[&p].table.holders(seg).into_iter().collect();
                    let holders: Vec<PeerId> = mates.into_iter().filter(|k| known.contains(k) && self.is_live(*k)).collect();
                    choose_provider(&self.candidates(p, &holders)).ok()
                } else {
                    // blind: the mate whose playhead is closest
                    let me = self.peers[&p].playhead;
                    mates.into_iter().filter(|k| self.is_live(*k)).min_by_key(|k| (self.peers[k].playhead.distance(me), *k))
                };
                match pick {
                    Some(k) => (Some(Provider::Peer(k)), 1),
                    None => return self.escalate(t),
                }
            }
            ScopeHint::Shortcut => {
                let shortcuts = self.overlay.shortcuts(p);
                if shortcuts.is_empty() {
                    return self.escalate(t);
                }
                let holders = self.live_holders(shortcuts.iter().copied(), seg);
                let pick = choose_provider(&self.candidates(p, &holders)).ok().map(Provider::Peer);
                (pick, shortcuts.len() as u64)
            }
            ScopeHint::Server => (Some(Provider::Server), 1),
        };
        self.ledger.add_requests(p, msgs);
        let tr = self.transfers.get_mut(&t).unwrap();
        tr.provider = provider;
        tr.purpose = Purpose::Prefetch { scope, urgent };
        if let Some(prov) = provider {
            let arrive = self.now + self.one_way(p.node(), self.node_of(prov));
            self.at(arrive, EventKind::FetchStart(t));
        }
        if scope != ScopeHint::Server {
            self.at(self.now + self.timeout, EventKind::RequestTimeout(t));
        }
    }

    fn escalate(&mut self, t: u64) {
        let tr = self.transfers.get_mut(&t).unwrap();
        let Purpose::Prefetch { scope, urgent } = tr.purpose else { unreachable!() };
        let next = match scope {
            ScopeHint::Session => ScopeHint::Shortcut,
            ScopeHint::Shortcut | ScopeHint::Server => ScopeHint::Server,
        };
        tr.purpose = Purpose::Prefetch { scope: next, urgent };
        tr.provider = None;
        self.send_request(t);
    }

    fn on_timeout(&mut self, t: u64) {
        let Some(tr) = self.transfers.get(&t) else { return };
        if tr.answered || !self.is_live(tr.requester) {
            return;
        }
        // the request is still ours only if the peer has not re-requested the segment
        if self.peers[&tr.requester].inflight.get(&tr.segment) != Some(&t) {
            self.transfers.remove(&t);
            return;
        }
        self.escalate(t);
    }

    fn on_tracker(&mut self, p: PeerId) {
        if !self.is_live(p) {
            return;
        }
        let min_skip = self.cfg.params.min_skip;
        let peer = &self.peers[&p];
        let rec = peer.record.as_slice();
        let targets = seek_targets(&rec[peer.reported_upto.saturating_sub(1)..], min_skip);
        let upto = rec.len();
        let msgs = self.tracker.update(&targets);
        let list = self.tracker.popularity_list(self.cfg.params.popularity_list_len, self.now);
        let peer = self.peers.get_mut(&p).unwrap();
        peer.reported_upto = upto;
        peer.popularity = list;
        // the report up, the list back down
        self.ledger.add_control(p, msgs + 1);
        self.at(self.now + Self::secs(self.cfg.params.tracker_period_s), EventKind::TrackerTick(p));
    }

    fn on_mining(&mut self, p: PeerId) {
        if !self.is_live(p) {
            return;
        }
        let me = self.peers[&p].playhead;
        let mut mates: Vec<PeerId> = self.overlay.session_mates(p).filter(|k| self.is_live(*k)).collect();
        mates.sort_by_key(|k| (self.peers[k].playhead.distance(me), *k));
        mates.truncate(self.cfg.params.mining_neighbors);
        let window = self.cfg.params.mining_window;
        for k in mates {
            let history = self.peers[&k].record.as_slice().to_vec();
            let peer = self.peers.get_mut(&p).unwrap();
            let start = peer.mined_upto.get(&k).copied().unwrap_or(0);
            mine_update_from(&mut peer.mining, &history, window, start);
            peer.mined_upto.insert(k, history.len());
            self.ledger.add_control(p, 1);
        }
        self.at(self.now + Self::secs(self.cfg.params.mining_period_s), EventKind::MiningTick(p));
    }

    fn on_shortcut(&mut self, p: PeerId) {
        if !self.is_live(p) {
            return;
        }
        let list = self.overlay.refresh_shortcuts(p, self.cfg.params.shortcut_count, &mut self.overlay_rng);
        self.log(|| format!("SHORTCUTS peer={p} [{}]", list.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")));
        self.at(self.now + Self::secs(self.cfg.params.shortcut_refresh_s), EventKind::ShortcutTick(p));
    }

    fn depart(&mut self, p: PeerId) {
        if !self.is_live(p) {
            return;
        }
        self.log(|| format!("DEPART peer={p}"));
        let peer = self.peers.get_mut(&p).unwrap();
        peer.live = false;
        peer.queue.clear();
        peer.inflight.clear();
        peer.tick_epoch += 1;
        self.overlay.handle_departure(p);
        let (gone, rs) = self.net.cancel_into(self.now, p.node());
        for f in gone {
            self.flows.remove(&f);
        }
        self.push_reschedules(rs);
        self.drop_transfers(|tr| tr.requester == p);
    }

    /// Forgets matching transfers, counting the seeks among them as lost.
    fn drop_transfers(&mut self, matches: impl Fn(&Transfer) -> bool) {
        let ids: Vec<u64> = self.transfers.iter().filter(|(_, tr)| matches(tr)).map(|(id, _)| *id).collect();
        for id in ids {
            let tr = self.transfers.remove(&id).unwrap();
            if matches!(tr.purpose, Purpose::Seek { .. }) {
                self.ledger.record_seeks_dropped(tr.requester, 1);
            }
        }
    }
}

/// Runs `config` with freshly generated topology and traces.
pub fn run(config: &RunConfig) -> Result<MetricsReport> {
    Ok(run_detailed(config, false)?.report)
}

pub fn run_detailed(config: &RunConfig, timeline: bool) -> Result<RunOutput> {
    config.validate()?;
    let topo = generate_topology(&config.topology_params())?;
    let traces = generate_traces(&config.workload_params(), &config.video)?;
    run_with(config, &topo, &traces, timeline)
}

/// Runs `config` on a given network and workload; the topology and
/// workload sections of `config` are ignored.
pub fn run_with(config: &RunConfig, topo: &NetworkTopology, traces: &[ViewerTrace], timeline: bool) -> Result<RunOutput> {
    config.validate()?;
    for (i, t) in traces.iter().enumerate() {
        if t.peer.0 as usize != i {
            return Err(Error::invalid("traces", format!("trace {i} belongs to peer {}", t.peer)));
        }
        if t.peer.0 >= topo.peer_count() {
            return Err(Error::invalid("traces", format!("peer {} has no network endpoint", t.peer)));
        }
        if !t.is_well_formed() {
            return Err(Error::invalid("traces", format!("trace of peer {} is out of order", t.peer)));
        }
        if let Some((_, s)) = t.seeks().find(|(_, s)| !config.video.contains(*s)) {
            return Err(Error::invalid("traces", format!("peer {} seeks past the video end to {s}", t.peer)));
        }
    }
    Sim::new(config, topo, traces, timeline).run()
}

/// Runs every config on a pool of `parallelism` workers; results keep the
/// input order and do not depend on the pool size.
pub fn sweep(configs: &[RunConfig], parallelism: usize) -> Result<Vec<MetricsReport>> {
    if parallelism == 0 {
        return Err(Error::invalid("parallelism", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::invalid("parallelism", e.to_string()))?;
    let results: Vec<Result<MetricsReport>> = pool.install(|| configs.par_iter().map(run).collect());
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Run { index, source: Box::new(e) }))
        .collect()
}

/// One line per seek outcome, for diffing runs.
pub fn outcome_log(ledger: &MetricsLedger) -> String {
    let mut out = String::new();
    for r in ledger.seek_log() {
        writeln!(out, "{} {} {} {} {:.3}", r.issued, r.peer, r.target, r.kind.name(), r.latency.as_millis_f64()).unwrap();
    }
    out
}
