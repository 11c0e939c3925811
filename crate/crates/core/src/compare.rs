//! Runs several strategies over the same workloads and checks the
//! expected orderings between them.

use std::fmt::{self, Write as _};

use crate::config::RunConfig;
use crate::engine;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::strategies::Strategy;

pub const METRICS: [&str; 6] = ["hr_r", "hr_g", "lat_mean_s", "util_rel", "util_glob", "overhead_msgs"];

fn metric(r: &MetricsReport, i: usize) -> Option<f64> {
    match i {
        0 => r.hr_r,
        1 => r.hr_g,
        2 => r.lat_mean_s,
        3 => r.util_rel,
        4 => r.util_glob,
        5 => Some(r.overhead_msgs as f64),
        _ => unreachable!(),
    }
}

/// Mean and sample standard deviation over the runs that define the metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Stat { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyStats {
    pub strategy: Strategy,
    pub runs: usize,
    /// In the order of [`METRICS`].
    pub stats: [Option<Stat>; 6],
    pub lat_early_decile: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub rows: Vec<StrategyStats>,
    /// `reports[i][j]` is strategy `i` on seed `j`.
    pub reports: Vec<Vec<MetricsReport>>,
    pub verdicts: Vec<Verdict>,
}

impl Comparison {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("strategy,runs");
        for m in METRICS {
            write!(out, ",{m}_mean,{m}_sd").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{}", row.strategy, row.runs).unwrap();
            for s in &row.stats {
                match s {
                    Some(s) => write!(out, ",{:.6},{:.6}", s.mean, s.sd).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn verdict_text(&self) -> String {
        self.verdicts.iter().map(|v| format!("{v}\n")).collect()
    }

    /// Human-readable table with mean±sd cells.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12}", "strategy");
        for m in METRICS {
            write!(out, " {m:>20}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{:<12}", row.strategy.name()).unwrap();
            for s in &row.stats {
                let cell = s.map_or("-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.sd));
                write!(out, " {cell:>20}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Runs each strategy on seeds `base.seed .. base.seed + repeats`. The
/// workload depends only on the seed, so strategies see identical viewers.
pub fn compare_strategies(base: &RunConfig, strategies: &[Strategy], repeats: u32, parallelism: usize) -> Result<Comparison> {
    if repeats == 0 {
        return Err(Error::invalid("repeats", "must be at least 1"));
    }
    if strategies.is_empty() {
        return Err(Error::invalid("strategies", "at least one strategy is required"));
    }
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| base.seed.wrapping_add(r)).collect();
    let configs: Vec<RunConfig> = strategies
        .iter()
        .flat_map(|s| seeds.iter().map(move |seed| RunConfig { strategy: *s, seed: *seed, ..base.clone() }))
        .collect();
    let flat = engine::sweep(&configs, parallelism)?;
    let reports: Vec<Vec<MetricsReport>> = flat.chunks(seeds.len()).map(|c| c.to_vec()).collect();
    let rows = strategies.iter().zip(&reports).map(|(s, rs)| stats_for(*s, rs)).collect();
    let verdicts = verdicts(strategies, &reports);
    Ok(Comparison { seeds, rows, reports, verdicts })
}

fn stats_for(strategy: Strategy, reports: &[MetricsReport]) -> StrategyStats {
    let stats = std::array::from_fn(|i| Stat::of(&reports.iter().filter_map(|r| metric(r, i)).collect::<Vec<_>>()));
    let early = Stat::of(&reports.iter().filter_map(|r| r.lat_early_decile_s).collect::<Vec<_>>());
    StrategyStats { strategy, runs: reports.len(), stats, lat_early_decile: early }
}

/// Share of seeds that must satisfy a per-seed ordering.
pub const SEED_QUORUM: f64 = 0.8;

fn quorum(ok: usize, n: usize) -> bool {
    ok as f64 >= (SEED_QUORUM * n as f64).ceil() - 1e-9
}

/// Orderings among whichever strategies were compared; a verdict needing
/// an absent strategy is skipped.
pub fn verdicts(strategies: &[Strategy], reports: &[Vec<MetricsReport>]) -> Vec<Verdict> {
    let find = |s: Strategy| strategies.iter().position(|x| *x == s).map(|i| &reports[i]);
    let n = reports.first().map_or(0, |r| r.len());
    let hr = |r: &MetricsReport, g: bool| if g { r.hr_g } else { r.hr_r }.unwrap_or(0.0);
    let mean = |rs: &[MetricsReport], f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let xs: Vec<f64> = rs.iter().filter_map(f).collect();
        Stat::of(&xs).map(|s| s.mean)
    };
    let mut out = Vec::new();

    // relative hit ratio chain, highest first
    let chain = [Strategy::Cooperative, Strategy::Mining, Strategy::Popularity, Strategy::Random, Strategy::None];
    let present: Vec<(Strategy, &Vec<MetricsReport>)> = chain.iter().filter_map(|s| find(*s).map(|r| (*s, r))).collect();
    if present.len() >= 2 {
        let mut ok = 0;
        for j in 0..n {
            let mut good = true;
            for w in present.windows(2) {
                let (a, b) = (hr(&w[0].1[j], false), hr(&w[1].1[j], false));
                // ties are allowed except against the two weakest baselines
                let strict = matches!(w[1].0, Strategy::Random | Strategy::None);
                if (strict && a <= b) || (!strict && a < b) {
                    good = false;
                }
            }
            if let Some(none) = find(Strategy::None) {
                good &= hr(&none[j], false) == 0.0;
            }
            ok += good as usize;
        }
        let means: Vec<String> = present
            .iter()
            .map(|(s, rs)| format!("{}={:.4}", s.name(), mean(rs, &|r| r.hr_r).unwrap_or(0.0)))
            .collect();
        out.push(Verdict { name: "hr_r_order", pass: quorum(ok, n), detail: format!("{ok}/{n} seeds hold; means {}", means.join(" ")) });
    }

    if let Some(coop) = find(Strategy::Cooperative) {
        let others: Vec<(Strategy, &Vec<MetricsReport>)> =
            strategies.iter().zip(reports).filter(|(s, _)| **s != Strategy::Cooperative).map(|(s, r)| (*s, r)).collect();
        if !others.is_empty() {
            let ok = (0..n).filter(|j| others.iter().all(|(_, rs)| hr(&coop[*j], true) > hr(&rs[*j], true))).count();
            out.push(Verdict {
                name: "hr_g_cooperative_greatest",
                pass: quorum(ok, n),
                detail: format!("{ok}/{n} seeds hold; cooperative mean {:.4}", mean(coop, &|r| r.hr_g).unwrap_or(0.0)),
            });

            let c = mean(coop, &|r| r.lat_mean_s);
            let worse: Vec<String> = others
                .iter()
                .filter(|(_, rs)| match (c, mean(rs, &|r| r.lat_mean_s)) {
                    (Some(c), Some(o)) => c >= o,
                    _ => true,
                })
                .map(|(s, rs)| format!("{}={:.4}", s.name(), mean(rs, &|r| r.lat_mean_s).unwrap_or(f64::NAN)))
                .collect();
            out.push(Verdict {
                name: "latency_cooperative_lowest",
                pass: worse.is_empty(),
                detail: format!(
                    "cooperative={:.4}{}",
                    c.unwrap_or(f64::NAN),
                    if worse.is_empty() { String::new() } else { format!(" not below {}", worse.join(" ")) }
                ),
            });

            let u = mean(coop, &|r| r.util_glob);
            let beaten: Vec<String> = others
                .iter()
                .filter_map(|(s, rs)| {
                    let o = mean(rs, &|r| r.util_glob)?;
                    (u.is_none_or(|u| o > u)).then(|| format!("{}={o:.4}", s.name()))
                })
                .collect();
            out.push(Verdict {
                name: "util_glob_cooperative_max",
                pass: beaten.is_empty() && u.is_some(),
                detail: format!(
                    "cooperative={:.4}{}",
                    u.unwrap_or(f64::NAN),
                    if beaten.is_empty() { String::new() } else { format!(" exceeded by {}", beaten.join(" ")) }
                ),
            });
        }
        let early = mean(coop, &|r| r.lat_early_decile_s);
        let all = mean(coop, &|r| r.lat_mean_s);
        if let (Some(e), Some(a)) = (early, all) {
            out.push(Verdict {
                name: "latency_early_peers_higher",
                pass: e > a,
                detail: format!("earliest decile {e:.4} vs overall {a:.4}"),
            });
        }
        for rival in [Strategy::Popularity, Strategy::Mining] {
            if let Some(rs) = find(rival) {
                let ok = (0..n).filter(|j| coop[*j].overhead_msgs < rs[*j].overhead_msgs).count();
                out.push(Verdict {
                    name: if rival == Strategy::Popularity { "overhead_below_popularity" } else { "overhead_below_mining" },
                    pass: ok == n,
                    detail: format!(
                        "{ok}/{n} seeds hold; cooperative {:.0} vs {} {:.0}",
                        mean(coop, &|r| Some(r.overhead_msgs as f64)).unwrap_or(0.0),
                        rival.name(),
                        mean(rs, &|r| Some(r.overhead_msgs as f64)).unwrap_or(0.0)
                    ),
                });
            }
        }
    }
    if let Some(rs) = find(Strategy::Random) {
        let total: u64 = rs.iter().map(|r| r.overhead_msgs).sum();
        out.push(Verdict { name: "overhead_random_zero", pass: total == 0, detail: format!("random control messages {total}") });
    }
    if let Some(rs) = find(Strategy::None) {
        let hits: Vec<f64> = rs.iter().filter_map(|r| r.hr_r).collect();
        let over: u64 = rs.iter().map(|r| r.overhead_msgs).sum();
        out.push(Verdict {
            name: "none_baseline",
            pass: hits.iter().all(|h| *h == 0.0) && over == 0,
            detail: format!("hr_r max {:.4}, control messages {over}", hits.iter().cloned().fold(0.0, f64::max)),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.workload.peer_count = 12;
        c.duration_s = 400.0;
        c
    }

    #[test]
    fn stat_of_sample() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.sd, s.n), (2.0, 1.0, 3));
        assert_eq!(Stat::of(&[4.0]).unwrap().sd, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn quorum_is_four_of_five() {
        assert!(quorum(4, 5));
        assert!(!quorum(3, 5));
        assert!(quorum(1, 1));
    }

    #[test]
    fn none_alone_is_one_zero_row() {
        let c = compare_strategies(&small(), &[Strategy::None], 1, 1).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.rows[0].stats[0].map(|s| s.mean), Some(0.0));
        assert!(c.all_pass(), "{}", c.verdict_text());
        assert_eq!(c.csv().lines().count(), 2);
    }

    #[test]
    fn duplicate_strategy_gives_identical_rows() {
        let c = compare_strategies(&small(), &[Strategy::Random, Strategy::Random], 2, 2).unwrap();
        assert_eq!(c.rows[0], c.rows[1]);
        let csv = c.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], lines[2]);
    }

    #[test]
    fn zero_repeats_rejected() {
        assert!(compare_strategies(&small(), &[Strategy::None], 0, 1).is_err());
    }
}
