//! Prefetching policies. Each planner is a pure function of the peer's view
//! and the strategy's own state; executing a plan is the transfer layer's
//! job.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BufferCache, SegmentId, Video};
use crate::error::{Error, Result};
use crate::gossip::{missing_segments, session_union, StateTable};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Random,
    Popularity,
    Mining,
    Cooperative,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::None, Strategy::Random, Strategy::Popularity, Strategy::Mining, Strategy::Cooperative];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Random => "random",
            Strategy::Popularity => "popularity",
            Strategy::Mining => "mining",
            Strategy::Cooperative => "cooperative",
        }
    }

    /// Whether the peer keeps and serves a local cache for seeks.
    pub fn prefetches(self) -> bool {
        self != Strategy::None
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy {s:?}; expected none, random, popularity, mining or cooperative")))
    }
}

/// Where the planner expects a target to be found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScopeHint {
    Session,
    Shortcut,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanTarget {
    pub segment: SegmentId,
    pub scope: ScopeHint,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrefetchPlan {
    /// Missing segments of the urgent window, nearest first.
    pub urgent: Vec<SegmentId>,
    pub targets: Vec<PlanTarget>,
}

impl PrefetchPlan {
    pub fn is_empty(&self) -> bool {
        self.urgent.is_empty() && self.targets.is_empty()
    }

    /// Every planned segment in request order: urgent first.
    pub fn segments(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.urgent.iter().copied().chain(self.targets.iter().map(|t| t.segment))
    }

    pub fn target_segments(&self) -> Vec<SegmentId> {
        self.targets.iter().map(|t| t.segment).collect()
    }
}

/// What a planner may look at for one peer.
#[derive(Clone, Copy, Debug)]
pub struct PeerView<'a> {
    pub video: &'a Video,
    pub playhead: SegmentId,
    pub cache: &'a BufferCache,
    /// Segments already requested and not yet delivered.
    pub pending: &'a BTreeSet<SegmentId>,
    /// Urgent window length in segments.
    pub urgent_window: u32,
}

impl PeerView<'_> {
    pub fn urgent_range(&self) -> Range<u32> {
        let lo = self.playhead.0.min(self.video.segment_count);
        let hi = self.playhead.0.saturating_add(self.urgent_window).min(self.video.segment_count);
        lo..hi
    }

    fn absent(&self, seg: SegmentId) -> bool {
        !self.cache.contains(seg) && !self.pending.contains(&seg)
    }

    /// Missing urgent-window segments, nearest first.
    pub fn urgent(&self) -> Vec<SegmentId> {
        self.urgent_range().map(SegmentId).filter(|s| self.absent(*s)).collect()
    }

    /// Whether `seg` may appear among the non-urgent targets.
    pub fn eligible(&self, seg: SegmentId) -> bool {
        self.video.contains(seg) && self.absent(seg) && !self.urgent_range().contains(&seg.0)
    }
}

pub fn plan_none(_view: &PeerView<'_>) -> PrefetchPlan {
    PrefetchPlan::default()
}

/// Up to `budget` distinct non-resident segments drawn uniformly from the
/// whole video.
pub fn plan_random(view: &PeerView<'_>, budget: usize, rng: &mut impl Rng) -> PrefetchPlan {
    let candidates: Vec<SegmentId> = view.video.segments().filter(|s| view.eligible(*s)).collect();
    let targets = candidates
        .choose_multiple(rng, budget)
        .map(|s| PlanTarget { segment: *s, scope: ScopeHint::Session })
        .collect();
    PrefetchPlan { urgent: view.urgent(), targets }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularEntry {
    pub segment: SegmentId,
    pub hits: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PopularityList {
    pub entries: Vec<PopularEntry>,
    pub epoch: SimTime,
}

impl PopularityList {
    /// Sorted by hits descending, ties by ascending segment.
    pub fn is_well_formed(&self) -> bool {
        self.entries.windows(2).all(|w| (std::cmp::Reverse(w[0].hits), w[0].segment) < (std::cmp::Reverse(w[1].hits), w[1].segment))
    }
}

/// Seek statistics accumulated by the tracker.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tracker {
    hits: BTreeMap<SegmentId, u64>,
    reports: u64,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts one report; returns the control messages it cost.
    pub fn update(&mut self, seek_targets: &[SegmentId]) -> u64 {
        for s in seek_targets {
            *self.hits.entry(*s).or_default() += 1;
        }
        self.reports += 1;
        1
    }

    pub fn reports(&self) -> u64 {
        self.reports
    }

    pub fn hits(&self, seg: SegmentId) -> u64 {
        self.hits.get(&seg).copied().unwrap_or(0)
    }

    /// The `len` most-hit segments.
    pub fn popularity_list(&self, len: usize, epoch: SimTime) -> PopularityList {
        let mut entries: Vec<PopularEntry> = self.hits.iter().map(|(s, h)| PopularEntry { segment: *s, hits: *h }).collect();
        entries.sort_by_key(|e| (std::cmp::Reverse(e.hits), e.segment));
        entries.truncate(len);
        PopularityList { entries, epoch }
    }
}

/// Popular segments the peer lacks, most hits first and then nearest to the
/// playhead.
pub fn plan_popularity(view: &PeerView<'_>, list: &PopularityList, budget: usize) -> PrefetchPlan {
    let mut picks: Vec<&PopularEntry> = list.entries.iter().filter(|e| view.eligible(e.segment)).collect();
    picks.sort_by_key(|e| (std::cmp::Reverse(e.hits), e.segment.distance(view.playhead), e.segment));
    let targets = picks
        .into_iter()
        .take(budget)
        .map(|e| PlanTarget { segment: e.segment, scope: ScopeHint::Session })
        .collect();
    PrefetchPlan { urgent: view.urgent(), targets }
}

/// Directed co-occurrence counts learned from neighbours' playback records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningModel {
    co_occurrence: BTreeMap<(SegmentId, SegmentId), u64>,
    pub support_threshold: f64,
    pub histories_seen: u64,
}

impl MiningModel {
    pub fn new(support_threshold: f64) -> Self {
        MiningModel { support_threshold, ..Self::default() }
    }

    pub fn count(&self, a: SegmentId, b: SegmentId) -> u64 {
        self.co_occurrence.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn rules(&self) -> impl Iterator<Item = ((SegmentId, SegmentId), u64)> + '_ {
        self.co_occurrence.iter().map(|(k, v)| (*k, *v))
    }

    pub fn is_empty(&self) -> bool {
        self.co_occurrence.is_empty()
    }

    /// Smallest count a rule needs to be used.
    pub fn min_support(&self) -> u64 {
        ((self.support_threshold * self.histories_seen as f64).ceil() as u64).max(1)
    }
}

/// Learns from one received history: every `b` played within `window` plays
/// after `a` counts once for `a -> b`. Returns the control messages it cost.
pub fn mine_update(model: &mut MiningModel, history: &[SegmentId], window: usize) -> u64 {
    mine_update_from(model, history, window, 0)
}

/// Like [`mine_update`] but only counts pairs whose consequent sits at
/// position `start` or later, so a history can be fed incrementally.
pub fn mine_update_from(model: &mut MiningModel, history: &[SegmentId], window: usize, start: usize) -> u64 {
    assert!(window >= 1, "mining window must be at least 1");
    if start >= history.len() {
        return 0;
    }
    let first = start.saturating_sub(window);
    for i in first..history.len() {
        let lo = (i + 1).max(start);
        let hi = (i + window).min(history.len() - 1);
        for j in lo..=hi {
            *model.co_occurrence.entry((history[i], history[j])).or_default() += 1;
        }
    }
    model.histories_seen += 1;
    1
}

/// Strongest consequents of the playhead segment the peer lacks.
pub fn plan_mining(view: &PeerView<'_>, model: &MiningModel, budget: usize) -> PrefetchPlan {
    let a = view.playhead;
    let min_support = model.min_support();
    let mut rules: Vec<(SegmentId, u64)> = model
        .co_occurrence
        .range((a, SegmentId(0))..=(a, SegmentId(u32::MAX)))
        .map(|((_, b), c)| (*b, *c))
        .filter(|(b, c)| *c >= min_support && view.eligible(*b))
        .collect();
    rules.sort_by_key(|(b, c)| (std::cmp::Reverse(*c), *b));
    let targets = rules
        .into_iter()
        .take(budget)
        .map(|(b, _)| PlanTarget { segment: b, scope: ScopeHint::Session })
        .collect();
    PrefetchPlan { urgent: view.urgent(), targets }
}

/// Segments within `horizon` of the playhead that nobody in the session
/// holds (to be fetched through shortcuts), then session-held segments the
/// peer lacks, nearest first, up to `budget` in total.
pub fn plan_cooperative(view: &PeerView<'_>, state: &StateTable, horizon: u32, budget: usize) -> PrefetchPlan {
    assert!(horizon >= 1, "cooperative horizon must be at least 1");
    let urgent = view.urgent();
    if view.playhead.0 >= view.video.segment_count {
        return PrefetchPlan { urgent, targets: Vec::new() };
    }
    let union = session_union(state, view.cache.segments());
    let lo = view.playhead;
    let hi = SegmentId(view.playhead.0.saturating_add(horizon).min(view.video.segment_count - 1));
    let rare = missing_segments(&union, lo, hi)
        .into_iter()
        .filter(|s| view.eligible(*s))
        .map(|segment| PlanTarget { segment, scope: ScopeHint::Shortcut });
    let held = union
        .range(lo..=hi)
        .copied()
        .filter(|s| view.eligible(*s))
        .map(|segment| PlanTarget { segment, scope: ScopeHint::Session });
    let targets = rare.chain(held).take(budget).collect();
    PrefetchPlan { urgent, targets }
}
