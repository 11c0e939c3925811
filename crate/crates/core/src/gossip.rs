//! Buffer-map gossip inside a session and the per-peer state table it
//! builds.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::domain::{BufferCache, SegmentId};
use crate::overlay::PeerId;
use crate::time::{SimDuration, SimTime};

/// Snapshot of one peer's cache as sent to its session mates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferMapMsg {
    pub sender: PeerId,
    pub segments: Arc<BTreeSet<SegmentId>>,
    pub playhead: SegmentId,
    pub issued_at: SimTime,
}

pub fn emit_gossip(sender: PeerId, cache: &BufferCache, playhead: SegmentId, now: SimTime) -> BufferMapMsg {
    BufferMapMsg { sender, segments: Arc::new(cache.segments().collect()), playhead, issued_at: now }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateRow {
    pub segments: Arc<BTreeSet<SegmentId>>,
    pub playhead: SegmentId,
    /// When the snapshot was issued.
    pub age: SimTime,
}

/// What one peer currently believes its session mates hold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StateTable {
    rows: BTreeMap<PeerId, StateRow>,
}

impl StateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, msg: &BufferMapMsg) {
        let newer = self.rows.get(&msg.sender).is_none_or(|r| r.age <= msg.issued_at);
        if newer {
            self.rows.insert(
                msg.sender,
                StateRow { segments: Arc::clone(&msg.segments), playhead: msg.playhead, age: msg.issued_at },
            );
        }
    }

    /// Inserts a row directly, e.g. from a printed table.
    pub fn insert_row(&mut self, peer: PeerId, segments: impl IntoIterator<Item = SegmentId>, playhead: SegmentId, age: SimTime) {
        self.rows.insert(peer, StateRow { segments: Arc::new(segments.into_iter().collect()), playhead, age });
    }

    /// Drops rows issued more than `max_age` before `now`.
    pub fn drop_stale(&mut self, now: SimTime, max_age: SimDuration) {
        self.rows.retain(|_, r| now.saturating_since(r.age) <= max_age);
    }

    pub fn remove(&mut self, peer: PeerId) {
        self.rows.remove(&peer);
    }

    /// Keeps only rows whose sender satisfies `keep`.
    pub fn retain_peers(&mut self, mut keep: impl FnMut(PeerId) -> bool) {
        self.rows.retain(|p, _| keep(*p));
    }

    pub fn rows(&self) -> impl Iterator<Item = (PeerId, &StateRow)> {
        self.rows.iter().map(|(p, r)| (*p, r))
    }

    pub fn row(&self, peer: PeerId) -> Option<&StateRow> {
        self.rows.get(&peer)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Peers whose last buffer map listed `seg`.
    pub fn holders(&self, seg: SegmentId) -> Vec<PeerId> {
        self.rows.iter().filter(|(_, r)| r.segments.contains(&seg)).map(|(p, _)| *p).collect()
    }

    pub fn contains_anywhere(&self, seg: SegmentId) -> bool {
        self.rows.values().any(|r| r.segments.contains(&seg))
    }
}

/// Every segment available somewhere in the session, own cache included.
pub fn session_union(table: &StateTable, self_cache: impl IntoIterator<Item = SegmentId>) -> BTreeSet<SegmentId> {
    let mut union: BTreeSet<SegmentId> = self_cache.into_iter().collect();
    for (_, row) in table.rows() {
        union.extend(row.segments.iter().copied());
    }
    union
}

/// Ascending ids in `[lo, hi]` that are absent from `union`.
pub fn missing_segments(union: &BTreeSet<SegmentId>, lo: SegmentId, hi: SegmentId) -> Vec<SegmentId> {
    assert!(lo <= hi, "empty range");
    (lo.0..=hi.0).map(SegmentId).filter(|s| !union.contains(s)).collect()
}

/// Counts control messages produced by buffer-map broadcasts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GossipBus {
    pub messages: u64,
}

impl GossipBus {
    /// Delivers `msg` to every recipient's table; one message each.
    pub fn broadcast<'a>(&mut self, msg: &BufferMapMsg, recipients: impl IntoIterator<Item = &'a mut StateTable>) -> u64 {
        let mut sent = 0;
        for table in recipients {
            table.apply(msg);
            sent += 1;
        }
        self.messages += sent;
        sent
    }
}
