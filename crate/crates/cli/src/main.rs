//! `drone-lmpc`: run racing campaigns, sweeps and solver benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use drone_lmpc::config::{parse_config, AblationMode, CampaignConfig, Track};
use drone_lmpc::error::{CampaignError, ConfigError};
use drone_lmpc::sim::{
    bench_solver, hyperparameter_sweep, run_campaign, write_campaign, BenchRow, CampaignSummary, SweepRecord,
};

#[derive(Parser)]
#[command(name = "drone-lmpc", version, about = "Iterative learning MPC for quadrotor racing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the baseline lap and then learning laps; print the per-iteration table.
    Race(Common),
    /// Run one campaign per point of the `[sweep]` grid.
    Sweep(Common),
    /// Time solves over the `[bench]` grid of horizons and neighbor counts.
    BenchSolver(Common),
    /// Parse and validate a configuration, then print it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file; the bundled track with defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Laps per campaign including the baseline.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// time-only | lateral-only | modified-cost | modified-cost+shifted-set
    #[arg(long)]
    mode: Option<AblationMode>,
}

/// Exit codes.
const EXIT_CONFIG: u8 = 1;
const EXIT_BASELINE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Baseline(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Baseline(_) => EXIT_BASELINE,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Baseline(e) | Failure::Io(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.into()),
            other => Failure::Config(other.into()),
        }
    }
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::BaselineFailed(_) => Failure::Baseline(e.into()),
            CampaignError::Config(c) => c.into(),
            CampaignError::Io { .. } => Failure::Io(e.into()),
            other => Failure::Config(other.into()),
        }
    }
}

fn io(e: anyhow::Error) -> Failure {
    Failure::Io(e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Race(c) => race(&c),
        Command::Sweep(c) => sweep(&c),
        Command::BenchSolver(c) => bench(&c),
        Command::ValidateConfig { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Load the configuration and apply command-line overrides.
fn load(c: &Common) -> Result<(CampaignConfig, Track), Failure> {
    let (mut cfg, track) = match &c.config {
        Some(path) => parse_config(path)?,
        None => {
            let cfg = CampaignConfig::bundled();
            let track = cfg.load_track()?;
            (cfg, track)
        }
    };
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.sim.seed = seed;
    }
    if let Some(n) = c.max_iterations {
        cfg.sim.max_iterations = n;
    }
    if let Some(mode) = c.mode {
        cfg.mode = mode;
    }
    cfg.validate(track.gates.len())?;
    Ok((cfg, track))
}

fn write_effective_config(cfg: &CampaignConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.output)
        .with_context(|| format!("cannot create {}", cfg.output.display()))
        .map_err(io)?;
    let path = cfg.output.join("effective_config.toml");
    fs::write(&path, cfg.to_toml_string()).with_context(|| format!("cannot write {}", path.display())).map_err(io)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, json + "\n").with_context(|| format!("cannot write {}", path.display())).map_err(io)
}

fn fmt_time(t: Option<f64>) -> String {
    t.map_or_else(|| "-".into(), |t| format!("{t:.2}"))
}

/// Per-iteration table: iteration, lap time, gates passed, mean solver time.
fn race_table(s: &CampaignSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode {}  track {}  f_d {} Hz  K {}  N {}", s.mode, s.track, s.f_d, s.neighbors, s.horizon);
    let _ = writeln!(out, "{:>4}  {:>9}  {:>5}  {:>15}  {}", "iter", "lap [s]", "gates", "solver [ms]", "result");
    for lap in &s.laps {
        let solver = if lap.iteration == 0 {
            "-".to_string()
        } else {
            format!("{:.2} ± {:.2}", lap.mean_solver_ms, lap.std_solver_ms)
        };
        let result = match (&lap.failure, lap.success) {
            (_, true) => "ok".to_string(),
            (Some(f), false) => format!("{f:?}"),
            (None, false) => "failed".to_string(),
        };
        let _ = writeln!(
            out,
            "{:>4}  {:>9}  {:>5}  {:>15}  {}",
            lap.iteration,
            fmt_time(lap.lap_time),
            lap.gates_passed,
            solver,
            result
        );
    }
    out
}

fn race(c: &Common) -> Result<(), Failure> {
    let (cfg, track) = load(c)?;
    write_effective_config(&cfg)?;
    let result = run_campaign(&cfg, &track)?;
    write_campaign(&cfg.output, &result)?;
    print!("{}", race_table(&result.summary));
    Ok(())
}

fn sweep_table(records: &[SweepRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:>3}  {:>3}  {:>9}  {:>5}  {:>11}", "f_d", "K", "N", "final [s]", "iters", "solver [ms]");
    for r in records {
        match &r.summary {
            Some(s) => {
                let times: Vec<f64> = s.laps.iter().skip(1).map(|l| l.mean_solver_ms).collect();
                let solver = if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
                let _ = writeln!(
                    out,
                    "{:>6}  {:>3}  {:>3}  {:>9}  {:>5}  {:>11.2}",
                    r.f_d,
                    r.neighbors,
                    r.horizon,
                    fmt_time(r.final_lap_time()),
                    s.successful_iterations,
                    solver
                );
            }
            None => {
                let err = r.error.as_deref().unwrap_or("failed");
                let _ = writeln!(out, "{:>6}  {:>3}  {:>3}  {err}", r.f_d, r.neighbors, r.horizon);
            }
        }
    }
    out
}

fn sweep(c: &Common) -> Result<(), Failure> {
    let (cfg, track) = load(c)?;
    if cfg.sweep.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("sweep: grid is empty")));
    }
    write_effective_config(&cfg)?;
    let results = hyperparameter_sweep(&cfg, &track, &cfg.sweep.points());
    let mut records = Vec::new();
    for (record, result) in results {
        if let Some(res) = &result {
            write_campaign(&cfg.output.join(record.label()), res)?;
        }
        records.push(record);
    }
    write_json(&cfg.output.join("sweep.json"), &records)?;
    print!("{}", sweep_table(&records));
    if records.iter().any(|r| r.summary.is_none()) {
        return Err(Failure::Baseline(anyhow::anyhow!("some sweep campaigns failed")));
    }
    Ok(())
}

fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:>3}  {:>6}  {:>15}", "N", "K", "solves", "solve [ms]");
    for r in rows {
        let time = format!("{:.2} ± {:.2}", r.mean_ms, r.std_ms);
        let _ = writeln!(out, "{:>3}  {:>3}  {:>6}  {:>15}", r.horizon, r.neighbors, r.times.len(), time);
    }
    out
}

fn bench(c: &Common) -> Result<(), Failure> {
    let (cfg, track) = load(c)?;
    if cfg.bench.horizon.is_empty() || cfg.bench.neighbors.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("bench: grid is empty")));
    }
    write_effective_config(&cfg)?;
    let grid: Vec<(usize, usize)> =
        cfg.bench.horizon.iter().flat_map(|&n| cfg.bench.neighbors.iter().map(move |&k| (n, k))).collect();
    let rows = bench_solver(&cfg, &track, &grid, cfg.bench.solves)?;
    write_json(&cfg.output.join("bench.json"), &rows)?;
    print!("{}", bench_table(&rows));
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let (cfg, track) = parse_config(path)?;
    println!("# track '{}' with {} gates", track.name, track.gates.len());
    print!("{}", cfg.to_toml_string());
    Ok(())
}
