use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use vodsim::analytics::{self, AnalyticParams};
use vodsim::compare::compare_strategies;
use vodsim::config::Overrides;
use vodsim::engine;
use vodsim::metrics::{self, MetricsReport};
use vodsim::workload::{generate_traces, write_traces};
use vodsim::{Error, RunConfig, Strategy};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_VERDICT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "vodsim", version, about = "Segment prefetching simulator for peer-to-peer video on demand")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one strategy on one seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the event timeline to `timeline.txt`.
        #[arg(long)]
        timeline: bool,
    },
    /// Simulate every listed strategy over consecutive seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: Batch,
    },
    /// Compare strategies on shared workloads and judge the expected orderings.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: Batch,
    },
    /// Print closed-form hit ratios, optionally checked against a run.
    Analytics {
        #[command(flatten)]
        common: Common,
        /// Segments a peer prefetches (s).
        #[arg(long = "prefetched", default_value_t = 5)]
        s: u64,
        /// Distinct segments prefetched across the session (S).
        #[arg(long = "session-prefetched", default_value_t = 10)]
        big_s: u64,
        /// Segments in the video (V).
        #[arg(long = "segments", default_value_t = 20)]
        v: u64,
        /// Candidate segments for mining (V_i).
        #[arg(long = "candidates", default_value_t = 20)]
        v_i: u64,
        /// Probability the next seek lands on a predicted segment (P_i).
        #[arg(long = "probability", default_value_t = 1.0)]
        p_i: f64,
        /// Run the configured strategy and compare its HR_r with the formula.
        #[arg(long)]
        validate: bool,
        #[arg(long, default_value_t = 0.03)]
        tolerance: f64,
    },
    /// Write the viewer traces a run would use, without simulating.
    TraceGen {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file with [video] [topology] [workload] [strategy] [run] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy name; `sweep` and `compare` also take a comma list or `all`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    peers: Option<u32>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct Batch {
    #[arg(long, default_value_t = 5)]
    repeats: u32,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

/// Failure carrying the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig { .. } | Error::Parse(_) | Error::Domain(_) | Error::Mismatch(_) => EXIT_VALIDATION,
            _ => EXIT_RUN,
        };
        Failure { code, err: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: EXIT_RUN, err }
    }
}

fn validation(msg: String) -> Failure {
    Failure { code: EXIT_VALIDATION, err: anyhow::anyhow!(msg) }
}

impl Common {
    /// Defaults, then the scenario file, then flags.
    fn config(&self, with_strategy: bool) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let o = Overrides {
            strategy: if with_strategy { self.strategy.clone() } else { None },
            seed: self.seed,
            peers: self.peers,
            duration_s: self.duration,
        };
        cfg.apply(&o)?;
        Ok(cfg)
    }

    fn strategies(&self, fallback: &[Strategy]) -> Result<Vec<Strategy>, Failure> {
        match self.strategy.as_deref() {
            None => Ok(fallback.to_vec()),
            Some("all") => Ok(Strategy::ALL.to_vec()),
            Some(list) => list.split(',').map(|s| s.trim().parse::<Strategy>().map_err(Failure::from)).collect(),
        }
    }
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn traces_text(cfg: &RunConfig) -> Result<String, Failure> {
    Ok(write_traces(&generate_traces(&cfg.workload_params(), &cfg.video)?))
}

fn export_runs(dir: &Path, reports: &[MetricsReport]) -> anyhow::Result<()> {
    let rows: Vec<_> = reports.iter().map(|r| r.summary_row()).collect();
    write(dir, "summary.csv", &metrics::summary_csv(&rows))?;
    for r in reports {
        write(dir, &metrics::per_peer_file_name(r.strategy, r.seed), &metrics::per_peer_csv(&r.per_peer))?;
    }
    Ok(())
}

/// Traces for each seed, headed by a comment line.
fn seed_traces(base: &RunConfig, seeds: &[u64]) -> Result<String, Failure> {
    let mut out = String::new();
    for &seed in seeds {
        out.push_str(&format!("# seed {seed}\n"));
        out.push_str(&traces_text(&RunConfig { seed, ..base.clone() })?);
    }
    Ok(out)
}

fn check_batch(b: &Batch) -> Result<(), Failure> {
    if b.repeats == 0 {
        return Err(validation("--repeats must be at least 1".into()));
    }
    if b.parallelism == 0 {
        return Err(validation("--parallelism must be at least 1".into()));
    }
    Ok(())
}

fn cmd_run(common: &Common, timeline: bool) -> Result<(), Failure> {
    let cfg = common.config(true)?;
    let out = engine::run_detailed(&cfg, timeline)?;
    let dir = &common.out_dir;
    export_runs(dir, std::slice::from_ref(&out.report))?;
    write(dir, "traces.txt", &traces_text(&cfg)?)?;
    if timeline {
        write(dir, "timeline.txt", &(out.timeline.join("\n") + "\n"))?;
    }
    print!("{}", metrics::summary_csv([&out.report.summary_row()]));
    Ok(())
}

fn cmd_sweep(common: &Common, batch: &Batch) -> Result<(), Failure> {
    check_batch(batch)?;
    let base = common.config(false)?;
    let strategies = common.strategies(&[base.strategy])?;
    let seeds: Vec<u64> = (0..batch.repeats as u64).map(|r| base.seed.wrapping_add(r)).collect();
    let configs: Vec<RunConfig> = strategies
        .iter()
        .flat_map(|s| seeds.iter().map(|seed| RunConfig { strategy: *s, seed: *seed, ..base.clone() }))
        .collect();
    let reports = engine::sweep(&configs, batch.parallelism)?;
    export_runs(&common.out_dir, &reports)?;
    write(&common.out_dir, "traces.txt", &seed_traces(&base, &seeds)?)?;
    let rows: Vec<_> = reports.iter().map(|r| r.summary_row()).collect();
    print!("{}", metrics::summary_csv(&rows));
    Ok(())
}

fn cmd_compare(common: &Common, batch: &Batch) -> Result<(), Failure> {
    check_batch(batch)?;
    let base = common.config(false)?;
    let strategies = common.strategies(&Strategy::ALL)?;
    let cmp = compare_strategies(&base, &strategies, batch.repeats, batch.parallelism)?;
    let dir = &common.out_dir;
    let flat: Vec<MetricsReport> = cmp.reports.iter().flatten().cloned().collect();
    export_runs(dir, &flat)?;
    write(dir, "comparison.csv", &cmp.csv())?;
    write(dir, "verdicts.txt", &cmp.verdict_text())?;
    write(dir, "traces.txt", &seed_traces(&base, &cmp.seeds)?)?;
    print!("{}\n{}", cmp.table(), cmp.verdict_text());
    if cmp.all_pass() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERDICT, err: anyhow::anyhow!("some orderings did not hold") })
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_analytics(
    common: &Common,
    s: u64,
    big_s: u64,
    v: u64,
    v_i: u64,
    p_i: f64,
    validate: bool,
    tolerance: f64,
) -> Result<(), Failure> {
    let params = AnalyticParams::new(s, big_s, v, v_i, analytics::probability(p_i)?)?;
    print!("{}", analytics::formula_table(&params)?);
    if !validate {
        return Ok(());
    }
    let cfg = common.config(true)?;
    if cfg.video.segment_count as u64 != v {
        return Err(validation(format!("--segments {v} differs from the video's {} segments", cfg.video.segment_count)));
    }
    let report = engine::run(&cfg)?;
    let verdict = analytics::validate_against_sim(&params, &cfg, &report, tolerance)?;
    write(&common.out_dir, "verdicts.txt", &format!("{verdict}\n"))?;
    println!("{verdict}");
    if verdict.pass {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERDICT, err: anyhow::anyhow!("simulated HR_r is outside the tolerance") })
    }
}

fn cmd_trace_gen(common: &Common) -> Result<(), Failure> {
    let cfg = common.config(true)?;
    let text = traces_text(&cfg)?;
    write(&common.out_dir, "traces.txt", &text)?;
    println!("{} traces written to {}", text.lines().count(), common.out_dir.join("traces.txt").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { common, timeline } => cmd_run(common, *timeline),
        Command::Sweep { common, batch } => cmd_sweep(common, batch),
        Command::Compare { common, batch } => cmd_compare(common, batch),
        Command::Analytics { common, s, big_s, v, v_i, p_i, validate, tolerance } => {
            cmd_analytics(common, *s, *big_s, *v, *v_i, *p_i, *validate, *tolerance)
        }
        Command::TraceGen { common } => cmd_trace_gen(common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
