//! Run configuration: defaults, scenario files and command-line overrides.
//!
//! A scenario file is TOML with the sections `[video]`, `[topology]`,
//! `[workload]`, `[strategy]` and `[run]`. Every key is optional and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Video;
use crate::error::{Error, Result};
use crate::seeds;
use crate::strategies::Strategy;
use crate::time::SimDuration;
use crate::topology::TopologyParams;
use crate::workload::{SeekDistribution, WorkloadParams};

/// Knobs shared by the prefetching strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// Non-urgent segments requested per planning round.
    pub budget: usize,
    pub urgent_window_s: u32,
    /// Cooperative look-ahead in segments.
    pub horizon: u32,
    /// Buffer-map gossip and planning period.
    pub gossip_period_s: u32,
    /// Rows older than this many gossip periods are dropped.
    pub stale_periods: u32,
    pub tracker_period_s: u32,
    pub popularity_list_len: usize,
    pub mining_window: usize,
    pub mining_period_s: u32,
    pub mining_neighbors: usize,
    pub support_threshold: f64,
    pub shortcut_count: usize,
    pub shortcut_refresh_s: u32,
    pub request_timeout_s: f64,
    /// Data requests a peer keeps in flight at once.
    pub max_inflight: usize,
    /// Periods averaged when scoring providers.
    pub score_window: usize,
    pub score_period_s: u32,
    pub cache_capacity: usize,
    /// Unplayed prefetched segments are dropped after this long.
    pub prefetch_ttl_s: u32,
    /// Smallest forward skip read as a seek in a playback record.
    pub min_skip: u32,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            budget: 4,
            urgent_window_s: 20,
            horizon: 60,
            gossip_period_s: 10,
            stale_periods: 3,
            tracker_period_s: 60,
            popularity_list_len: 20,
            mining_window: 5,
            mining_period_s: 60,
            mining_neighbors: 3,
            support_threshold: 0.0,
            shortcut_count: 5,
            shortcut_refresh_s: 60,
            request_timeout_s: 2.0,
            max_inflight: 2,
            score_window: 5,
            score_period_s: 10,
            cache_capacity: 120,
            prefetch_ttl_s: 60,
            min_skip: 2,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("strategy.gossip_period_s", self.gossip_period_s),
            ("strategy.stale_periods", self.stale_periods),
            ("strategy.tracker_period_s", self.tracker_period_s),
            ("strategy.mining_period_s", self.mining_period_s),
            ("strategy.shortcut_refresh_s", self.shortcut_refresh_s),
            ("strategy.score_period_s", self.score_period_s),
            ("strategy.horizon", self.horizon),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.mining_window == 0 {
            return Err(Error::invalid("strategy.mining_window", "must be at least 1"));
        }
        if self.score_window == 0 {
            return Err(Error::invalid("strategy.score_window", "must be at least 1"));
        }
        if self.max_inflight == 0 {
            return Err(Error::invalid("strategy.max_inflight", "must be at least 1"));
        }
        if !(self.request_timeout_s > 0.0 && self.request_timeout_s.is_finite()) {
            return Err(Error::invalid("strategy.request_timeout_s", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.support_threshold) {
            return Err(Error::invalid("strategy.support_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.request_timeout_s)
    }
}

/// Everything one simulation run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub video: Video,
    pub topology: TopologyParams,
    pub session_width_s: u32,
    /// Streams a peer forwards to children in its session tree.
    pub tree_fanout: usize,
    pub workload: WorkloadParams,
    pub params: StrategyParams,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::Cooperative,
            video: Video::default(),
            topology: TopologyParams::default(),
            session_width_s: 120,
            tree_fanout: 4,
            workload: WorkloadParams::default(),
            params: StrategyParams::default(),
            duration_s: 1800.0,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("run.duration_s", "must be positive"));
        }
        if self.session_width_s == 0 {
            return Err(Error::invalid("topology.session_width_s", "must be positive"));
        }
        if self.tree_fanout == 0 {
            return Err(Error::invalid("topology.tree_fanout", "must be at least 1"));
        }
        let t = &self.topology;
        if t.as_count == 0 || t.routers_per_as == 0 {
            return Err(Error::invalid("topology.as_count", "AS and router counts must be positive"));
        }
        let (lo, hi) = t.access_delay_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("topology.access_delay_ms", "needs 0 <= low <= high"));
        }
        let (lo, hi) = t.core_delay_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("topology.core_delay_ms", "needs 0 <= low <= high"));
        }
        if t.peer_up_bps == 0 || t.peer_down_bps == 0 || t.server_up_bps == 0 {
            return Err(Error::invalid("topology.peer_up_bps", "bandwidths must be positive"));
        }
        self.workload.validate()?;
        self.params.validate()
    }

    /// Topology parameters with the peer count and a seed derived from the
    /// run seed.
    pub fn topology_params(&self) -> TopologyParams {
        TopologyParams { peer_count: self.workload.peer_count, seed: seeds::derive(self.seed, "topology"), ..self.topology.clone() }
    }

    /// Workload parameters with a seed derived from the run seed only, so
    /// every strategy sees the same traces.
    pub fn workload_params(&self) -> WorkloadParams {
        WorkloadParams { seed: seeds::derive(self.seed, "workload"), horizon_s: self.duration_s, ..self.workload.clone() }
    }

    pub fn urgent_window_segments(&self) -> u32 {
        self.params.urgent_window_s.div_ceil(self.video.segment_duration_s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_scenario_str(&text)
    }

    /// Defaults overlaid with the keys present in `text`.
    pub fn from_scenario_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        let mut cfg = RunConfig::default();
        file.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides on top of the current values.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = &o.strategy {
            self.strategy = s.parse()?;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.peers {
            self.workload.peer_count = p;
        }
        if let Some(d) = o.duration_s {
            self.duration_s = d;
        }
        self.validate()
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub peers: Option<u32>,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    video: Option<VideoSection>,
    topology: Option<TopologySection>,
    workload: Option<WorkloadSection>,
    strategy: Option<StrategySection>,
    run: Option<RunSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoSection {
    segment_count: Option<u32>,
    segment_duration_s: Option<u32>,
    streaming_rate_bps: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologySection {
    as_count: Option<u32>,
    routers_per_as: Option<u32>,
    access_delay_ms: Option<[f64; 2]>,
    core_delay_ms: Option<[f64; 2]>,
    peer_up_bps: Option<u64>,
    peer_down_bps: Option<u64>,
    server_up_bps: Option<u64>,
    session_width_s: Option<u32>,
    tree_fanout: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSection {
    peers: Option<u32>,
    arrival_rate: Option<f64>,
    seek_rate: Option<f64>,
    seek_distribution: Option<String>,
    zipf_alpha: Option<f64>,
    forward_fraction: Option<f64>,
    /// Ignore the viewer's position when drawing targets.
    seek_anywhere: Option<bool>,
    short_session_fraction: Option<f64>,
    pause_rate: Option<f64>,
    pause_mean_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategySection {
    name: Option<String>,
    budget: Option<usize>,
    urgent_window_s: Option<u32>,
    horizon: Option<u32>,
    gossip_period_s: Option<u32>,
    stale_periods: Option<u32>,
    tracker_period_s: Option<u32>,
    popularity_list_len: Option<usize>,
    mining_window: Option<usize>,
    mining_period_s: Option<u32>,
    mining_neighbors: Option<usize>,
    support_threshold: Option<f64>,
    shortcut_count: Option<usize>,
    shortcut_refresh_s: Option<u32>,
    request_timeout_s: Option<f64>,
    max_inflight: Option<usize>,
    score_window: Option<usize>,
    score_period_s: Option<u32>,
    cache_capacity: Option<usize>,
    prefetch_ttl_s: Option<u32>,
    min_skip: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    duration_s: Option<f64>,
    seed: Option<u64>,
}

macro_rules! set {
    ($src:expr => $($field:ident : $dst:expr),* $(,)?) => {
        $( if let Some(v) = $src.$field { $dst = v; } )*
    };
}

impl ScenarioFile {
    fn apply(self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.video {
            set!(v => segment_count: cfg.video.segment_count, segment_duration_s: cfg.video.segment_duration_s,
                 streaming_rate_bps: cfg.video.streaming_rate_bps);
        }
        if let Some(t) = self.topology {
            set!(t => as_count: cfg.topology.as_count, routers_per_as: cfg.topology.routers_per_as,
                 peer_up_bps: cfg.topology.peer_up_bps, peer_down_bps: cfg.topology.peer_down_bps,
                 server_up_bps: cfg.topology.server_up_bps, session_width_s: cfg.session_width_s,
                 tree_fanout: cfg.tree_fanout);
            if let Some([lo, hi]) = t.access_delay_ms {
                cfg.topology.access_delay_ms = (lo, hi);
            }
            if let Some([lo, hi]) = t.core_delay_ms {
                cfg.topology.core_delay_ms = (lo, hi);
            }
        }
        if let Some(w) = self.workload {
            let wl = &mut cfg.workload;
            set!(w => peers: wl.peer_count, arrival_rate: wl.arrival_rate, seek_rate: wl.seek_rate,
                 short_session_fraction: wl.short_session_fraction, pause_rate: wl.pause_rate,
                 pause_mean_s: wl.pause_mean_s);
            if let Some(f) = w.forward_fraction {
                wl.forward_fraction = Some(f);
            }
            if w.seek_anywhere == Some(true) {
                wl.forward_fraction = None;
            }
            let alpha = match wl.seek_distribution {
                SeekDistribution::Zipf { alpha } => alpha,
                SeekDistribution::Uniform => 0.8,
            };
            let alpha = w.zipf_alpha.unwrap_or(alpha);
            wl.seek_distribution = match w.seek_distribution.as_deref() {
                None | Some("zipf") => SeekDistribution::Zipf { alpha },
                Some("uniform") => SeekDistribution::Uniform,
                Some(other) => {
                    return Err(Error::invalid("workload.seek_distribution", format!("expected uniform or zipf, got {other:?}")))
                }
            };
            if w.zipf_alpha.is_some() && wl.seek_distribution == SeekDistribution::Uniform {
                return Err(Error::invalid("workload.zipf_alpha", "only meaningful with seek_distribution = \"zipf\""));
            }
        }
        if let Some(s) = self.strategy {
            if let Some(name) = &s.name {
                cfg.strategy = name.parse()?;
            }
            let p = &mut cfg.params;
            set!(s => budget: p.budget, urgent_window_s: p.urgent_window_s, horizon: p.horizon,
                 gossip_period_s: p.gossip_period_s, stale_periods: p.stale_periods,
                 tracker_period_s: p.tracker_period_s, popularity_list_len: p.popularity_list_len,
                 mining_window: p.mining_window, mining_period_s: p.mining_period_s,
                 mining_neighbors: p.mining_neighbors, support_threshold: p.support_threshold,
                 shortcut_count: p.shortcut_count, shortcut_refresh_s: p.shortcut_refresh_s,
                 request_timeout_s: p.request_timeout_s, max_inflight: p.max_inflight,
                 score_window: p.score_window, score_period_s: p.score_period_s,
                 cache_capacity: p.cache_capacity, prefetch_ttl_s: p.prefetch_ttl_s, min_skip: p.min_skip);
        }
        if let Some(r) = self.run {
            set!(r => duration_s: cfg.duration_s, seed: cfg.seed);
        }
        Ok(())
    }
}
