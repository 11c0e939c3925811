//! Core value types: segments, the video, per-peer buffer caches and
//! playback records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{SimDuration, SimTime};

/// Ordinal of a segment within the video.
///
/// Stored 0-based; every textual rendering (traces, reports, timelines) uses
/// the 1-based label, so segment `SegmentId(0)` prints as `1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub u32);

impl SegmentId {
    /// Builds a segment from its 1-based label.
    ///
    /// # Panics
    /// If `label` is zero.
    pub fn from_label(label: u32) -> Self {
        assert!(label >= 1, "segment labels are 1-based");
        SegmentId(label - 1)
    }

    pub fn label(self) -> u32 {
        self.0 + 1
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Absolute distance in segments.
    pub fn distance(self, other: SegmentId) -> u32 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for SegmentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<u32>() {
            Ok(label) if label >= 1 => Ok(SegmentId(label - 1)),
            _ => Err(Error::Parse(format!("invalid segment label {s:?}"))),
        }
    }
}

/// The single video every peer in the swarm is watching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub segment_count: u32,
    /// Seconds of playback carried by one segment.
    pub segment_duration_s: u32,
    /// Bits per second.
    pub streaming_rate_bps: u64,
}

impl Default for Video {
    fn default() -> Self {
        Video { segment_count: 900, segment_duration_s: 1, streaming_rate_bps: 512_000 }
    }
}

impl Video {
    pub fn validate(&self) -> Result<()> {
        if self.segment_count == 0 {
            return Err(Error::invalid("video.segment_count", "must be at least 1"));
        }
        if self.segment_duration_s == 0 {
            return Err(Error::invalid("video.segment_duration_s", "must be positive"));
        }
        if self.streaming_rate_bps == 0 {
            return Err(Error::invalid("video.streaming_rate_bps", "must be positive"));
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> u64 {
        self.segment_count as u64 * self.segment_duration_s as u64
    }

    /// One segment carries exactly its playback time at the streaming rate.
    pub fn segment_bits(&self) -> u64 {
        self.streaming_rate_bps * self.segment_duration_s as u64
    }

    pub fn segment_duration(&self) -> SimDuration {
        SimDuration::from_secs(self.segment_duration_s as u64)
    }

    pub fn contains(&self, seg: SegmentId) -> bool {
        seg.0 < self.segment_count
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentId> {
        (0..self.segment_count).map(SegmentId)
    }
}

/// How a cached segment got into the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// Pushed by the session's streaming tree, or fetched on demand after a seek.
    LocalStream,
    PrefetchPeer,
    PrefetchShortcut,
    /// Prefetched from the media server after escalation.
    Server,
}

impl Origin {
    pub fn is_prefetch(self) -> bool {
        !matches!(self, Origin::LocalStream)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub arrival: SimTime,
    pub origin: Origin,
    pub consumed: bool,
}

/// A peer's bounded local segment store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferCache {
    capacity: usize,
    entries: BTreeMap<SegmentId, CacheEntry>,
}

impl BufferCache {
    pub fn new(capacity: usize) -> Self {
        BufferCache { capacity, entries: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, seg: SegmentId) -> bool {
        self.entries.contains_key(&seg)
    }

    pub fn get(&self, seg: SegmentId) -> Option<&CacheEntry> {
        self.entries.get(&seg)
    }

    pub fn entries(&self) -> impl Iterator<Item = (SegmentId, &CacheEntry)> {
        self.entries.iter().map(|(s, e)| (*s, e))
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.entries.keys().copied()
    }

    /// Places `seg` in the cache, evicting at most one entry when full.
    ///
    /// Re-inserting a resident segment only refreshes its arrival time.
    /// Victim order: consumed entries farthest behind `playhead`, then
    /// unconsumed prefetched entries oldest first, then unconsumed streamed
    /// entries farthest from `playhead`. Ties go to the lower segment index.
    pub fn insert(
        &mut self,
        seg: SegmentId,
        origin: Origin,
        now: SimTime,
        playhead: SegmentId,
    ) -> Option<SegmentId> {
        if let Some(entry) = self.entries.get_mut(&seg) {
            entry.arrival = now;
            return None;
        }
        if self.capacity == 0 {
            return None;
        }
        let evicted = if self.entries.len() >= self.capacity {
            let victim = self.victim(playhead).expect("full cache has a victim");
            self.entries.remove(&victim);
            Some(victim)
        } else {
            None
        };
        self.entries.insert(seg, CacheEntry { arrival: now, origin, consumed: false });
        evicted
    }

    fn victim(&self, playhead: SegmentId) -> Option<SegmentId> {
        let behind = |s: SegmentId| playhead.0 as i64 - s.0 as i64;
        let consumed = self
            .entries
            .iter()
            .filter(|(_, e)| e.consumed)
            // max_by_key keeps the last maximum; iterate descending so the
            // lowest index wins ties.
            .rev()
            .max_by_key(|(s, _)| behind(**s))
            .map(|(s, _)| *s);
        if consumed.is_some() {
            return consumed;
        }
        let prefetched = self
            .entries
            .iter()
            .filter(|(_, e)| e.origin.is_prefetch())
            .min_by_key(|(s, e)| (e.arrival, **s))
            .map(|(s, _)| *s);
        if prefetched.is_some() {
            return prefetched;
        }
        self.entries
            .keys()
            .rev()
            .max_by_key(|s| s.distance(playhead))
            .copied()
    }

    /// Drops unconsumed prefetched entries older than `ttl`.
    pub fn expire(&mut self, now: SimTime, ttl: SimDuration) -> Vec<SegmentId> {
        let stale: Vec<SegmentId> = self
            .entries
            .iter()
            .filter(|(_, e)| e.origin.is_prefetch() && !e.consumed && now.saturating_since(e.arrival) > ttl)
            .map(|(s, _)| *s)
            .collect();
        for s in &stale {
            self.entries.remove(s);
        }
        stale
    }

    /// Marks a resident segment as played. Returns the entry's state before
    /// the call, or `None` when the segment is not resident.
    pub fn consume(&mut self, seg: SegmentId) -> Option<CacheEntry> {
        let entry = self.entries.get_mut(&seg)?;
        let before = *entry;
        entry.consumed = true;
        Some(before)
    }

    pub fn remove(&mut self, seg: SegmentId) -> Option<CacheEntry> {
        self.entries.remove(&seg)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Segments in the order they were played, duplicates allowed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybackRecord {
    played: Vec<SegmentId>,
}

impl PlaybackRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, seg: SegmentId) {
        self.played.push(seg);
    }

    pub fn as_slice(&self) -> &[SegmentId] {
        &self.played
    }

    pub fn len(&self) -> usize {
        self.played.len()
    }

    pub fn is_empty(&self) -> bool {
        self.played.is_empty()
    }

    pub fn last(&self) -> Option<SegmentId> {
        self.played.last().copied()
    }

    /// Number of forward jumps that skip at least `min_skip` segments.
    pub fn count_forward_seeks(&self, min_skip: u32) -> usize {
        count_forward_seeks(&self.played, min_skip)
    }
}

impl From<Vec<SegmentId>> for PlaybackRecord {
    fn from(played: Vec<SegmentId>) -> Self {
        PlaybackRecord { played }
    }
}

/// Counts adjacent pairs `(a, b)` with at least `min_skip` segments between
/// them, i.e. `b - a - 1 >= min_skip`.
pub fn count_forward_seeks(played: &[SegmentId], min_skip: u32) -> usize {
    played
        .windows(2)
        .filter(|w| w[1].0 > w[0].0 && w[1].0 - w[0].0 > min_skip)
        .count()
}

/// Targets of the VCR jumps visible in a record: forward jumps skipping at
/// least `min_skip` segments and every backward jump.
pub fn seek_targets(played: &[SegmentId], min_skip: u32) -> Vec<SegmentId> {
    played
        .windows(2)
        .filter(|w| w[1].0 <= w[0].0 || w[1].0 - w[0].0 > min_skip)
        .map(|w| w[1])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(label: u32) -> SegmentId {
        SegmentId::from_label(label)
    }

    fn t(secs: u64) -> SimTime {
        SimTime(secs * 1_000_000)
    }

    #[test]
    fn insert_under_capacity_evicts_nothing() {
        let mut c = BufferCache::new(3);
        c.insert(seg(1), Origin::PrefetchPeer, t(0), seg(1));
        c.insert(seg(2), Origin::PrefetchPeer, t(1), seg(1));
        assert_eq!(c.insert(seg(5), Origin::PrefetchPeer, t(2), seg(1)), None);
        assert_eq!(c.segments().collect::<Vec<_>>(), vec![seg(1), seg(2), seg(5)]);
    }

    #[test]
    fn oldest_unconsumed_prefetch_is_evicted() {
        let mut c = BufferCache::new(2);
        c.insert(seg(1), Origin::PrefetchPeer, t(0), seg(1));
        c.insert(seg(2), Origin::PrefetchPeer, t(5), seg(1));
        assert_eq!(c.insert(seg(5), Origin::PrefetchPeer, t(6), seg(1)), Some(seg(1)));
    }

    #[test]
    fn consumed_entry_behind_playhead_goes_first() {
        // Hand trace: 1 is consumed and 5 behind playhead 6, so the first
        // branch fires before unconsumed 2 is considered, whatever its origin.
        for origin in [Origin::LocalStream, Origin::PrefetchPeer] {
            let mut c = BufferCache::new(2);
            c.insert(seg(1), Origin::LocalStream, t(0), seg(1));
            c.consume(seg(1));
            c.insert(seg(2), origin, t(1), seg(1));
            assert_eq!(c.insert(seg(5), Origin::PrefetchPeer, t(2), seg(6)), Some(seg(1)));
        }
    }

    #[test]
    fn streamed_entries_farthest_from_playhead_are_last_resort() {
        let mut c = BufferCache::new(2);
        c.insert(seg(10), Origin::LocalStream, t(0), seg(9));
        c.insert(seg(30), Origin::LocalStream, t(0), seg(9));
        assert_eq!(c.insert(seg(11), Origin::LocalStream, t(1), seg(9)), Some(seg(30)));
    }

    #[test]
    fn reinsert_refreshes_without_evicting() {
        let mut c = BufferCache::new(1);
        c.insert(seg(3), Origin::PrefetchPeer, t(0), seg(1));
        assert_eq!(c.insert(seg(3), Origin::Server, t(9), seg(1)), None);
        let e = c.get(seg(3)).unwrap();
        assert_eq!(e.arrival, t(9));
        assert_eq!(e.origin, Origin::PrefetchPeer);
    }

    #[test]
    fn expire_drops_only_stale_unconsumed_prefetch() {
        let mut c = BufferCache::new(4);
        c.insert(seg(3), Origin::PrefetchPeer, t(0), seg(1));
        assert_eq!(c.expire(t(100), SimDuration::from_secs(60)), vec![seg(3)]);

        let mut c = BufferCache::new(4);
        c.insert(seg(3), Origin::PrefetchPeer, t(0), seg(1));
        c.consume(seg(3));
        assert!(c.expire(t(100), SimDuration::from_secs(60)).is_empty());

        let mut c = BufferCache::new(4);
        c.insert(seg(3), Origin::LocalStream, t(0), seg(1));
        assert!(c.expire(t(100), SimDuration::from_secs(60)).is_empty());

        // exactly at the ttl boundary the entry survives
        let mut c = BufferCache::new(4);
        c.insert(seg(3), Origin::Server, t(40), seg(1));
        assert!(c.expire(t(100), SimDuration::from_secs(60)).is_empty());
    }

    #[test]
    fn expire_matches_filter_on_mixed_cache() {
        let origins = [Origin::LocalStream, Origin::PrefetchPeer, Origin::PrefetchShortcut, Origin::Server];
        let mut c = BufferCache::new(10);
        for i in 0..10u32 {
            c.insert(SegmentId(i), origins[(i % 4) as usize], t(i as u64 * 13), SegmentId(0));
            if i % 3 == 0 {
                c.consume(SegmentId(i));
            }
        }
        let now = t(150);
        let ttl = SimDuration::from_secs(45);
        let mut expected = Vec::new();
        for (s, e) in c.entries() {
            let age = now.0 - e.arrival.0;
            if e.origin != Origin::LocalStream && !e.consumed && age > ttl.0 {
                expected.push(s);
            }
        }
        assert_eq!(c.expire(now, ttl), expected);
    }

    #[test]
    fn forward_seek_example_from_playback_record() {
        let rec: Vec<SegmentId> = [1, 2, 7, 9, 13, 14, 15, 19].into_iter().map(seg).collect();
        assert_eq!(count_forward_seeks(&rec, 2), 3);
        // every forward gap counts once the threshold drops to one
        assert_eq!(count_forward_seeks(&rec, 1), 4);
        let contiguous: Vec<SegmentId> = [1, 2, 3, 4].into_iter().map(seg).collect();
        for k in 1..5 {
            assert_eq!(count_forward_seeks(&contiguous, k), 0);
        }
    }

    #[test]
    fn seek_targets_include_backward_jumps() {
        let rec: Vec<SegmentId> = [1, 2, 7, 8, 3, 4].into_iter().map(seg).collect();
        assert_eq!(seek_targets(&rec, 2), vec![seg(7), seg(3)]);
    }

    #[test]
    fn segment_labels_are_one_based() {
        assert_eq!(SegmentId(0).to_string(), "1");
        assert_eq!("12".parse::<SegmentId>().unwrap(), SegmentId(11));
        assert!("0".parse::<SegmentId>().is_err());
    }

    #[test]
    fn video_validation_and_sizes() {
        let v = Video::default();
        assert_eq!(v.segment_bits(), 512_000);
        assert!(v.validate().is_ok());
        let bad = Video { segment_count: 0, ..Video::default() };
        assert!(bad.validate().is_err());
    }

    fn brute_force_seeks(rec: &[SegmentId], min_skip: u32) -> usize {
        let mut n = 0;
        for i in 1..rec.len() {
            let (a, b) = (rec[i - 1].0 as i64, rec[i].0 as i64);
            if b - a > min_skip as i64 {
                n += 1;
            }
        }
        n
    }

    proptest! {
        #[test]
        fn forward_seeks_match_pair_scan(raw in prop::collection::vec(0u32..60, 50), k in 1u32..6) {
            let rec: Vec<SegmentId> = raw.into_iter().map(SegmentId).collect();
            prop_assert_eq!(count_forward_seeks(&rec, k), brute_force_seeks(&rec, k));
        }

        #[test]
        fn contiguous_runs_add_no_seeks(raw in prop::collection::vec(0u32..60, 1..30), run in 1u32..20, k in 1u32..5) {
            let mut rec: Vec<SegmentId> = raw.into_iter().map(SegmentId).collect();
            let before = count_forward_seeks(&rec, k);
            let start = rec.last().unwrap().0;
            rec.extend((1..=run).map(|d| SegmentId(start + d)));
            prop_assert_eq!(count_forward_seeks(&rec, k), before);
        }

        #[test]
        fn cache_never_exceeds_capacity(
            cap in 1usize..8,
            ops in prop::collection::vec((0u8..4, 0u32..20, 0u64..200), 1..200),
        ) {
            let mut c = BufferCache::new(cap);
            let origins = [Origin::LocalStream, Origin::PrefetchPeer, Origin::PrefetchShortcut, Origin::Server];
            let mut now = 0u64;
            for (op, s, dt) in ops {
                now += dt;
                let resident_before = c.contains(SegmentId(s));
                match op {
                    0 | 1 => {
                        let ev = c.insert(SegmentId(s), origins[(s % 4) as usize], t(now), SegmentId(10));
                        if resident_before {
                            prop_assert_eq!(ev, None);
                        }
                    }
                    2 => { c.consume(SegmentId(s)); }
                    _ => { c.expire(t(now), SimDuration::from_secs(30)); }
                }
                prop_assert!(c.len() <= cap);
                for (_, e) in c.entries() {
                    prop_assert!(e.arrival <= t(now));
                }
            }
        }
    }
}
