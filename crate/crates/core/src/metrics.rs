//! Run ledger, derived ratios and CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::SegmentId;
use crate::error::{Error, Result};
use crate::overlay::PeerId;
use crate::strategies::Strategy;
use crate::time::{SimDuration, SimTime};
use crate::transfer::SeekKind;

pub const SUMMARY_HEADER: &str = "strategy,seed,hr_r,hr_g,lat_mean_s,lat_p95_s,util_rel,util_glob,overhead_msgs";
pub const PER_PEER_HEADER: &str = "peer,seeks,rel_hits,glob_hits,shortcut,server,prefetched,played,ctrl_msgs";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerLedger {
    pub arrival: SimTime,
    pub relative_hits: u64,
    pub global_hits: u64,
    pub shortcut_fetches: u64,
    pub server_fetches: u64,
    pub seek_latencies: Vec<SimDuration>,
    /// Prefetched segments placed in the cache.
    pub prefetched_segments: u64,
    /// Of those, how many were later played.
    pub prefetched_played: u64,
    /// Gossip, tracker, popularity and history messages.
    pub control_msgs: u64,
    /// Data requests and their responses.
    pub request_msgs: u64,
    pub stall: SimDuration,
    /// Seeks the viewer started, whatever became of them.
    pub seeks_issued: u64,
    /// Seeks still unanswered when the peer left or the run ended.
    pub seeks_dropped: u64,
}

impl PeerLedger {
    pub fn seeks(&self) -> u64 {
        self.relative_hits + self.global_hits + self.shortcut_fetches + self.server_fetches
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeekRecord {
    pub peer: PeerId,
    pub issued: SimTime,
    pub target: SegmentId,
    #[serde(with = "seek_kind_serde")]
    pub kind: SeekKind,
    pub latency: SimDuration,
}

mod seek_kind_serde {
    use super::SeekKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &SeekKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SeekKind, D::Error> {
        let name = String::deserialize(d)?;
        [SeekKind::RelativeHit, SeekKind::GlobalHit, SeekKind::ShortcutFetch, SeekKind::ServerFetch]
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown seek kind {name}")))
    }
}

/// Every counter a run accumulates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsLedger {
    peers: BTreeMap<PeerId, PeerLedger>,
    seek_log: Vec<SeekRecord>,
    pub server_bits: u64,
}

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_peer(&mut self, peer: PeerId, arrival: SimTime) {
        self.peers.entry(peer).or_default().arrival = arrival;
    }

    fn peer_mut(&mut self, peer: PeerId) -> &mut PeerLedger {
        self.peers.entry(peer).or_default()
    }

    pub fn peer(&self, peer: PeerId) -> Option<&PeerLedger> {
        self.peers.get(&peer)
    }

    pub fn peers(&self) -> impl Iterator<Item = (PeerId, &PeerLedger)> {
        self.peers.iter().map(|(p, l)| (*p, l))
    }

    pub fn seek_log(&self) -> &[SeekRecord] {
        &self.seek_log
    }

    pub fn record_seek(&mut self, rec: SeekRecord) {
        debug_assert_eq!(rec.kind == SeekKind::RelativeHit, rec.latency == SimDuration::ZERO);
        let l = self.peer_mut(rec.peer);
        match rec.kind {
            SeekKind::RelativeHit => l.relative_hits += 1,
            SeekKind::GlobalHit => l.global_hits += 1,
            SeekKind::ShortcutFetch => l.shortcut_fetches += 1,
            SeekKind::ServerFetch => l.server_fetches += 1,
        }
        l.seek_latencies.push(rec.latency);
        self.seek_log.push(rec);
    }

    pub fn record_seek_issued(&mut self, peer: PeerId) {
        self.peer_mut(peer).seeks_issued += 1;
    }

    pub fn record_seeks_dropped(&mut self, peer: PeerId, n: u64) {
        self.peer_mut(peer).seeks_dropped += n;
    }

    pub fn record_prefetched(&mut self, peer: PeerId) {
        self.peer_mut(peer).prefetched_segments += 1;
    }

    pub fn record_prefetch_played(&mut self, peer: PeerId) {
        let l = self.peer_mut(peer);
        l.prefetched_played += 1;
        debug_assert!(l.prefetched_played <= l.prefetched_segments);
    }

    pub fn add_control(&mut self, peer: PeerId, msgs: u64) {
        self.peer_mut(peer).control_msgs += msgs;
    }

    pub fn add_requests(&mut self, peer: PeerId, msgs: u64) {
        self.peer_mut(peer).request_msgs += msgs;
    }

    pub fn add_stall(&mut self, peer: PeerId, d: SimDuration) {
        let l = self.peer_mut(peer);
        l.stall = l.stall + d;
    }

    pub fn totals(&self) -> PeerLedger {
        let mut t = PeerLedger::default();
        for l in self.peers.values() {
            t.relative_hits += l.relative_hits;
            t.global_hits += l.global_hits;
            t.shortcut_fetches += l.shortcut_fetches;
            t.server_fetches += l.server_fetches;
            t.prefetched_segments += l.prefetched_segments;
            t.prefetched_played += l.prefetched_played;
            t.control_msgs += l.control_msgs;
            t.request_msgs += l.request_msgs;
            t.stall = t.stall + l.stall;
            t.seeks_issued += l.seeks_issued;
            t.seeks_dropped += l.seeks_dropped;
        }
        t
    }
}

/// Relative hits over seeks; `None` without seeks.
pub fn relative_hit_ratio(ledger: &MetricsLedger) -> Option<f64> {
    let t = ledger.totals();
    ratio(t.relative_hits, t.seeks())
}

/// Session (cache-to-cache) hits over seeks; `None` without seeks.
pub fn global_hit_ratio(ledger: &MetricsLedger) -> Option<f64> {
    let t = ledger.totals();
    ratio(t.global_hits, t.seeks())
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Utilization {
    pub relative: Option<f64>,
    pub global: Option<f64>,
}

/// Per-peer mean of played/prefetched (peers that prefetched nothing are
/// skipped) and the run-wide pooled ratio.
pub fn utilization_ratios(ledger: &MetricsLedger) -> Utilization {
    let per_peer: Vec<f64> = ledger
        .peers
        .values()
        .filter(|l| l.prefetched_segments > 0)
        .map(|l| l.prefetched_played as f64 / l.prefetched_segments as f64)
        .collect();
    let relative = (!per_peer.is_empty()).then(|| per_peer.iter().sum::<f64>() / per_peer.len() as f64);
    let t = ledger.totals();
    Utilization { relative, global: ratio(t.prefetched_played, t.prefetched_segments) }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRow {
    pub peer: u32,
    pub seeks: u64,
    pub rel_hits: u64,
    pub glob_hits: u64,
    pub shortcut: u64,
    pub server: u64,
    pub prefetched: u64,
    pub played: u64,
    pub ctrl_msgs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub seeks: u64,
    pub hr_r: Option<f64>,
    pub hr_g: Option<f64>,
    /// `hr_r + hr_g`, for readers who treat the global ratio as cumulative.
    pub hr_combined: Option<f64>,
    pub lat_mean_s: Option<f64>,
    pub lat_median_s: Option<f64>,
    pub lat_p95_s: Option<f64>,
    /// Mean seek latency of the earliest-arriving tenth of the peers.
    pub lat_early_decile_s: Option<f64>,
    pub util_rel: Option<f64>,
    pub util_glob: Option<f64>,
    pub overhead_msgs: u64,
    pub request_msgs: u64,
    pub server_bits: u64,
    pub stall_s: f64,
    pub per_peer: Vec<PeerRow>,
}

impl MetricsReport {
    pub fn from_ledger(strategy: Strategy, seed: u64, ledger: &MetricsLedger) -> Self {
        let t = ledger.totals();
        let mut lats: Vec<f64> = ledger.seek_log.iter().map(|r| r.latency.as_secs_f64()).collect();
        lats.sort_by(f64::total_cmp);

        let mut by_arrival: Vec<(&PeerId, &PeerLedger)> = ledger.peers.iter().collect();
        by_arrival.sort_by_key(|(p, l)| (l.arrival, **p));
        let decile = by_arrival.len().div_ceil(10);
        let early: Vec<f64> = by_arrival[..decile]
            .iter()
            .flat_map(|(_, l)| l.seek_latencies.iter().map(|d| d.as_secs_f64()))
            .collect();

        let util = utilization_ratios(ledger);
        let hr_r = ratio(t.relative_hits, t.seeks());
        let hr_g = ratio(t.global_hits, t.seeks());
        MetricsReport {
            strategy,
            seed,
            seeks: t.seeks(),
            hr_r,
            hr_g,
            hr_combined: ratio(t.relative_hits + t.global_hits, t.seeks()),
            lat_mean_s: mean(&lats),
            lat_median_s: percentile(&lats, 0.5),
            lat_p95_s: percentile(&lats, 0.95),
            lat_early_decile_s: mean(&early),
            util_rel: util.relative,
            util_glob: util.global,
            overhead_msgs: t.control_msgs,
            request_msgs: t.request_msgs,
            server_bits: ledger.server_bits,
            stall_s: t.stall.as_secs_f64(),
            per_peer: ledger
                .peers
                .iter()
                .map(|(p, l)| PeerRow {
                    peer: p.0,
                    seeks: l.seeks(),
                    rel_hits: l.relative_hits,
                    glob_hits: l.global_hits,
                    shortcut: l.shortcut_fetches,
                    server: l.server_fetches,
                    prefetched: l.prefetched_segments,
                    played: l.prefetched_played,
                    ctrl_msgs: l.control_msgs,
                })
                .collect(),
        }
    }

    pub fn summary_row(&self) -> SummaryRow {
        SummaryRow {
            strategy: self.strategy,
            seed: self.seed,
            hr_r: self.hr_r.map(quantize),
            hr_g: self.hr_g.map(quantize),
            lat_mean_s: self.lat_mean_s.map(quantize),
            lat_p95_s: self.lat_p95_s.map(quantize),
            util_rel: self.util_rel.map(quantize),
            util_glob: self.util_glob.map(quantize),
            overhead_msgs: self.overhead_msgs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One line of the summary CSV, at CSV precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub hr_r: Option<f64>,
    pub hr_g: Option<f64>,
    pub lat_mean_s: Option<f64>,
    pub lat_p95_s: Option<f64>,
    pub util_rel: Option<f64>,
    pub util_glob: Option<f64>,
    pub overhead_msgs: u64,
}

fn quantize(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn summary_csv<'a>(rows: impl IntoIterator<Item = &'a SummaryRow>) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.seed,
            fmt_opt(r.hr_r),
            fmt_opt(r.hr_g),
            fmt_opt(r.lat_mean_s),
            fmt_opt(r.lat_p95_s),
            fmt_opt(r.util_rel),
            fmt_opt(r.util_glob),
            r.overhead_msgs
        )
        .unwrap();
    }
    out
}

pub fn per_peer_csv(rows: &[PeerRow]) -> String {
    let mut out = String::from(PER_PEER_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.peer, r.seeks, r.rel_hits, r.glob_hits, r.shortcut, r.server, r.prefetched, r.played, r.ctrl_msgs
        )
        .unwrap();
    }
    out
}

fn body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => Ok(lines.filter(|(_, l)| !l.is_empty())),
        _ => Err(Error::Parse(format!("expected header {header:?}"))),
    }
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != n {
        return Err(Error::Parse(format!("line {}: expected {n} fields, found {}", lineno + 1, f.len())));
    }
    Ok(f)
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("line {}: bad {what} {s:?}", lineno + 1)))
}

fn parse_opt(s: &str, what: &str, lineno: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(s, what, lineno).map(Some)
    }
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    body(text, SUMMARY_HEADER)?
        .map(|(n, line)| {
            let f = fields(line, 9, n)?;
            Ok(SummaryRow {
                strategy: f[0].parse()?,
                seed: parse_num(f[1], "seed", n)?,
                hr_r: parse_opt(f[2], "hr_r", n)?,
                hr_g: parse_opt(f[3], "hr_g", n)?,
                lat_mean_s: parse_opt(f[4], "lat_mean_s", n)?,
                lat_p95_s: parse_opt(f[5], "lat_p95_s", n)?,
                util_rel: parse_opt(f[6], "util_rel", n)?,
                util_glob: parse_opt(f[7], "util_glob", n)?,
                overhead_msgs: parse_num(f[8], "overhead_msgs", n)?,
            })
        })
        .collect()
}

pub fn parse_per_peer_csv(text: &str) -> Result<Vec<PeerRow>> {
    body(text, PER_PEER_HEADER)?
        .map(|(n, line)| {
            let f = fields(line, 9, n)?;
            let v: Vec<u64> = f.iter().map(|x| parse_num(x, "count", n)).collect::<Result<_>>()?;
            Ok(PeerRow {
                peer: u32::try_from(v[0]).map_err(|_| Error::Parse(format!("line {}: peer id out of range", n + 1)))?,
                seeks: v[1],
                rel_hits: v[2],
                glob_hits: v[3],
                shortcut: v[4],
                server: v[5],
                prefetched: v[6],
                played: v[7],
                ctrl_msgs: v[8],
            })
        })
        .collect()
}

pub fn per_peer_file_name(strategy: Strategy, seed: u64) -> String {
    format!("per_peer_{strategy}_{seed}.csv")
}

/// Writes `summary.csv`, `summary.json` and the per-peer CSV into `dir`.
pub fn export_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("summary.csv", summary_csv([&report.summary_row()]))?;
    write("summary.json", report.to_json())?;
    write(&per_peer_file_name(report.strategy, report.seed), per_peer_csv(&report.per_peer))
}
