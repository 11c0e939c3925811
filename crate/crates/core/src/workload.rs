//! Reproducible viewer behaviour: Poisson arrivals, VCR seeks, pauses and
//! early departures.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::domain::{SegmentId, Video};
use crate::error::{Error, Result};
use crate::overlay::PeerId;
use crate::seeds::{self, SimRng};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Seek(SegmentId),
    Pause,
    Resume,
    Leave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub kind: TraceKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewerTrace {
    pub peer: PeerId,
    pub arrival: SimTime,
    pub events: Vec<TraceEvent>,
}

impl ViewerTrace {
    pub fn seeks(&self) -> impl Iterator<Item = (SimTime, SegmentId)> + '_ {
        self.events.iter().filter_map(|e| match e.kind {
            TraceKind::Seek(s) => Some((e.time, s)),
            _ => None,
        })
    }

    pub fn leave_time(&self) -> Option<SimTime> {
        self.events.last().filter(|e| e.kind == TraceKind::Leave).map(|e| e.time)
    }

    /// Event times strictly increase, start after arrival, and LEAVE is last.
    pub fn is_well_formed(&self) -> bool {
        let mut last = self.arrival;
        for (i, e) in self.events.iter().enumerate() {
            if e.time <= last {
                return false;
            }
            if e.kind == TraceKind::Leave && i + 1 != self.events.len() {
                return false;
            }
            last = e.time;
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SeekDistribution {
    Uniform,
    Zipf { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub peer_count: u32,
    /// Poisson arrival rate, peers per second.
    pub arrival_rate: f64,
    /// Seeks per second of viewing, per viewer.
    pub seek_rate: f64,
    pub seek_distribution: SeekDistribution,
    /// Probability a seek jumps forward. `None` draws targets from the
    /// whole video regardless of the viewer's position.
    pub forward_fraction: Option<f64>,
    pub short_session_fraction: f64,
    /// Pauses per second of playing time.
    pub pause_rate: f64,
    pub pause_mean_s: f64,
    /// Traces are generated up to this absolute time.
    pub horizon_s: f64,
    pub seed: u64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            peer_count: 100,
            arrival_rate: 1.0 / 9.0,
            seek_rate: 1.0 / 120.0,
            seek_distribution: SeekDistribution::Zipf { alpha: 0.8 },
            forward_fraction: Some(0.7),
            short_session_fraction: 0.30,
            pause_rate: 1.0 / 600.0,
            pause_mean_s: 20.0,
            horizon_s: 1800.0,
            seed: 0,
        }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<()> {
        if self.peer_count == 0 {
            return Err(Error::invalid("workload.peer_count", "must be at least 1"));
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::invalid("workload.arrival_rate", "must be positive"));
        }
        if !(self.seek_rate >= 0.0 && self.seek_rate.is_finite()) {
            return Err(Error::invalid("workload.seek_rate", "must be non-negative"));
        }
        if let SeekDistribution::Zipf { alpha } = self.seek_distribution {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::invalid("workload.zipf_alpha", "must be non-negative"));
            }
        }
        if let Some(f) = self.forward_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("workload.forward_fraction", "must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.short_session_fraction) {
            return Err(Error::invalid("workload.short_session_fraction", "must lie in [0, 1]"));
        }
        if !(self.pause_rate >= 0.0 && self.pause_rate.is_finite()) {
            return Err(Error::invalid("workload.pause_rate", "must be non-negative"));
        }
        if !(self.pause_mean_s > 0.0 && self.pause_mean_s.is_finite()) {
            return Err(Error::invalid("workload.pause_mean_s", "must be positive"));
        }
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return Err(Error::invalid("workload.horizon_s", "must be positive"));
        }
        Ok(())
    }
}

/// Seek-target sampler over the video's segments.
///
/// Zipf ranks come from a seeded permutation of the segments, so the
/// popular segments are scattered through the video rather than bunched at
/// its start.
#[derive(Clone, Debug)]
pub struct TargetSampler {
    /// prefix[i] = total weight of segments 0..i
    prefix: Vec<f64>,
}

impl TargetSampler {
    pub fn new(video: &Video, dist: SeekDistribution, seed: u64) -> Self {
        let n = video.segment_count as usize;
        let weights: Vec<f64> = match dist {
            SeekDistribution::Uniform => vec![1.0; n],
            SeekDistribution::Zipf { alpha } => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut seeds::substream(seed, "popularity"));
                let mut w = vec![0.0; n];
                for (rank, seg) in order.into_iter().enumerate() {
                    w[seg] = 1.0 / ((rank + 1) as f64).powf(alpha);
                }
                w
            }
        };
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for w in weights {
            prefix.push(prefix.last().unwrap() + w);
        }
        TargetSampler { prefix }
    }

    pub fn weight(&self, seg: SegmentId) -> f64 {
        self.prefix[seg.index() + 1] - self.prefix[seg.index()]
    }

    /// Draws from segments `lo..hi` proportionally to their weight.
    pub fn sample_range(&self, lo: u32, hi: u32, rng: &mut impl Rng) -> SegmentId {
        debug_assert!(lo < hi);
        let (a, b) = (self.prefix[lo as usize], self.prefix[hi as usize]);
        let u = a + rng.random::<f64>() * (b - a);
        // first index i in lo..hi with prefix[i + 1] > u
        let mut left = lo as usize;
        let mut right = hi as usize - 1;
        while left < right {
            let mid = (left + right) / 2;
            if self.prefix[mid + 1] > u {
                right = mid;
            } else {
                left = mid + 1;
            }
        }
        SegmentId(left as u32)
    }

    /// Picks a seek target for a viewer at `pos`.
    pub fn draw(&self, pos: SegmentId, forward_fraction: Option<f64>, rng: &mut impl Rng) -> SegmentId {
        let n = (self.prefix.len() - 1) as u32;
        let Some(f) = forward_fraction else {
            return self.sample_range(0, n, rng);
        };
        let fwd = (pos.0 + 2, n);
        let back = (0, pos.0);
        let want_forward = rng.random_bool(f);
        let (first, second) = if want_forward { (fwd, back) } else { (back, fwd) };
        for (lo, hi) in [first, second] {
            if lo < hi {
                return self.sample_range(lo, hi, rng);
            }
        }
        self.sample_range(0, n, rng)
    }
}

fn exp_gap(rate: f64, rng: &mut SimRng) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    Exp::new(rate).expect("positive rate").sample(rng)
}

pub fn generate_traces(params: &WorkloadParams, video: &Video) -> Result<Vec<ViewerTrace>> {
    params.validate()?;
    video.validate()?;
    let sampler = TargetSampler::new(video, params.seek_distribution, params.seed);
    let mut arrivals_rng = seeds::substream(params.seed, "arrivals");
    let mut t = 0.0;
    let mut arrivals = Vec::with_capacity(params.peer_count as usize);
    for _ in 0..params.peer_count {
        t += exp_gap(params.arrival_rate, &mut arrivals_rng);
        arrivals.push(t);
    }
    Ok(arrivals
        .into_iter()
        .enumerate()
        .map(|(i, arrival)| {
            let mut rng = SimRng::seed_from_u64(seeds::derive_indexed(params.seed, "trace", i as u64));
            one_trace(PeerId(i as u32), arrival, params, video, &sampler, &mut rng)
        })
        .collect())
}

fn one_trace(
    peer: PeerId,
    arrival_s: f64,
    params: &WorkloadParams,
    video: &Video,
    sampler: &TargetSampler,
    rng: &mut SimRng,
) -> ViewerTrace {
    let arrival = SimTime::from_secs_f64(arrival_s);
    let short = rng.random_bool(params.short_session_fraction);
    let leave_s = short.then(|| arrival_s + rng.random_range(30.0..300.0));
    let end_s = leave_s.unwrap_or(f64::INFINITY).min(params.horizon_s.max(arrival_s));
    let seg_s = video.segment_duration_s as f64;

    let mut events = Vec::new();
    let mut last = arrival;
    let mut push = |events: &mut Vec<TraceEvent>, secs: f64, kind: TraceKind| {
        let mut time = SimTime::from_secs_f64(secs);
        if time <= last {
            time = SimTime(last.0 + 1);
        }
        last = time;
        events.push(TraceEvent { time, kind });
    };

    let mut now = arrival_s;
    // nominal playback position in segments, assuming no stalls
    let mut pos = 0.0f64;
    let mut playing = true;
    loop {
        if playing {
            let to_seek = exp_gap(params.seek_rate, rng);
            let to_pause = exp_gap(params.pause_rate, rng);
            let dt = to_seek.min(to_pause);
            if now + dt >= end_s {
                break;
            }
            now += dt;
            pos += dt / seg_s;
            if pos >= video.segment_count as f64 {
                break;
            }
            if to_seek <= to_pause {
                let target = sampler.draw(SegmentId(pos as u32), params.forward_fraction, rng);
                push(&mut events, now, TraceKind::Seek(target));
                pos = target.0 as f64;
            } else {
                push(&mut events, now, TraceKind::Pause);
                playing = false;
            }
        } else {
            let dt = exp_gap(1.0 / params.pause_mean_s, rng);
            if now + dt >= end_s {
                break;
            }
            now += dt;
            push(&mut events, now, TraceKind::Resume);
            playing = true;
        }
    }
    if let Some(l) = leave_s {
        push(&mut events, l, TraceKind::Leave);
    }
    ViewerTrace { peer, arrival, events }
}

/// One trace per line: `peer arrival; t KIND [target]; ...`.
pub fn write_traces(traces: &[ViewerTrace]) -> String {
    let mut out = String::new();
    for tr in traces {
        write!(out, "{} {}", tr.peer, tr.arrival).unwrap();
        for e in &tr.events {
            match e.kind {
                TraceKind::Seek(s) => write!(out, "; {} SEEK {}", e.time, s),
                TraceKind::Pause => write!(out, "; {} PAUSE", e.time),
                TraceKind::Resume => write!(out, "; {} RESUME", e.time),
                TraceKind::Leave => write!(out, "; {} LEAVE", e.time),
            }
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_traces(text: &str) -> Result<Vec<ViewerTrace>> {
    let mut traces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("trace line {}: {what}", n + 1));
        let mut parts = line.split(';');
        let head = parts.next().unwrap_or_default();
        let mut hw = head.split_whitespace();
        let peer = hw.next().and_then(|p| p.parse::<u32>().ok()).ok_or_else(|| bad("peer id"))?;
        let arrival = hw.next().ok_or_else(|| bad("arrival"))?.parse::<SimTime>().map_err(|_| bad("arrival"))?;
        if hw.next().is_some() {
            return Err(bad("trailing tokens after arrival"));
        }
        let mut events = Vec::new();
        for part in parts {
            let mut w = part.split_whitespace();
            let time = w.next().ok_or_else(|| bad("event time"))?.parse::<SimTime>().map_err(|_| bad("event time"))?;
            let kind = match w.next() {
                Some("SEEK") => TraceKind::Seek(w.next().ok_or_else(|| bad("seek target"))?.parse().map_err(|_| bad("seek target"))?),
                Some("PAUSE") => TraceKind::Pause,
                Some("RESUME") => TraceKind::Resume,
                Some("LEAVE") => TraceKind::Leave,
                _ => return Err(bad("event kind")),
            };
            if w.next().is_some() {
                return Err(bad("trailing tokens in event"));
            }
            events.push(TraceEvent { time, kind });
        }
        let trace = ViewerTrace { peer: PeerId(peer), arrival, events };
        if !trace.is_well_formed() {
            return Err(bad("event times must increase and LEAVE must be last"));
        }
        traces.push(trace);
    }
    Ok(traces)
}
