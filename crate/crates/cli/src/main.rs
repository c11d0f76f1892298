//! `sylva`: generate forests, run missions and batches, and build reports.
//!
//! Exit codes: 0 completed, 1 runtime failure, 2 usage or config error,
//! 3 mission timeout, 4 collision.

mod batch;
mod config;
mod report;
mod stats;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sylva_core::simulation::{run_mission, Strategy, Termination};
use sylva_core::world::{DensityRegion, ForestParams};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;
const EXIT_COLLISION: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        Self { code: EXIT_FAILED, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

#[derive(Parser)]
#[command(name = "sylva", version, about = "Adaptive frontier exploration in simulated forests")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a forest and write it as JSON.
    GenWorld(GenWorld),
    /// Run one mission and write its artifacts.
    Run(RunArgs),
    /// Run every (strategy, seed) cell and aggregate.
    Batch(BatchArgs),
    /// Build rate, velocity and balance CSVs from run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenWorld {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// World extent in meters.
    #[arg(long, value_parser = parse_size, default_value = "30,30,2")]
    size: [f64; 3],
    /// Trees per square meter.
    #[arg(long, default_value_t = 0.05, conflicts_with = "regions")]
    density: f64,
    /// JSON file with a list of {min, max, density} regions.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long, short, default_value = "world.json")]
    out: PathBuf,
}

/// Flags here override the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = config::parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    n_agents: Option<usize>,
    #[arg(long)]
    max_time: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; defaults to the file's `output_dir`, then `out`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BatchArgs {
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = config::parse_strategy)]
    strategies: Vec<Strategy>,
    /// Times (s) at which team volume is reported.
    #[arg(long, value_delimiter = ',')]
    timestamps: Vec<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Missions run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    n_agents: Option<usize>,
    #[arg(long)]
    max_time: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, short, default_value = "report")]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected X,Y,Z".to_string())
}

fn gen_world(a: GenWorld) -> Result<u8, CliError> {
    let regions = match &a.regions {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let r: Vec<DensityRegion> =
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            Some(r)
        }
        None => None,
    };
    let params = ForestParams { seed: a.seed, extent: a.size, density: a.density, regions, ..Default::default() };
    let world = params.generate().map_err(|e| CliError::usage(e.to_string()))?;
    world.save(&a.out).map_err(|e| CliError::failed(e.to_string()))?;
    println!("{} trees -> {}", world.trees.len(), a.out.display());
    Ok(0)
}

fn run(a: RunArgs) -> Result<u8, CliError> {
    let file = config::load(&a.config)?;
    let mut cfg = file.mission;
    if !file.trajectory_set {
        cfg.record_trajectory = true;
    }
    let o = a.overrides;
    if let Some(s) = o.seed {
        cfg.forest.seed = s;
    }
    if let Some(s) = o.strategy {
        cfg.strategy = s;
    }
    if let Some(n) = o.n_agents {
        cfg.n_agents = n;
    }
    if let Some(t) = o.max_time {
        cfg.max_mission_time = t;
    }
    config::validate(&cfg)?;
    let out_dir = a.out.or(file.output_dir).unwrap_or_else(|| PathBuf::from("out"));
    let out = run_mission(&cfg).map_err(|e| CliError::usage(e.to_string()))?;
    out.write_artifacts(&out_dir).map_err(|e| CliError::failed(e.to_string()))?;
    let s = &out.summary;
    println!(
        "{:?} at {:.1} s: {:.1} m3 explored, {:.1} m flown, mean velocity {:.2} m/s -> {}",
        s.termination,
        s.completion_time,
        s.team_explored_m3,
        s.total_distance_m,
        s.mean_velocity,
        out_dir.display()
    );
    if let Some(c) = &out.result.collision {
        eprintln!("collision: {c:?}");
    }
    Ok(match s.termination {
        Termination::Completed => 0,
        Termination::Timeout => EXIT_TIMEOUT,
        Termination::Collision => EXIT_COLLISION,
    })
}

/// Flag, then file, then default.
fn pick<T>(flag: Vec<T>, from_file: Vec<T>, default: Vec<T>) -> Vec<T> {
    [flag, from_file].into_iter().find(|v| !v.is_empty()).unwrap_or(default)
}

fn batch(a: BatchArgs) -> Result<u8, CliError> {
    let file = config::load(&a.config)?;
    let mut base = file.mission;
    if let Some(n) = a.n_agents {
        base.n_agents = n;
    }
    if let Some(t) = a.max_time {
        base.max_mission_time = t;
    }
    config::validate(&base)?;
    let seeds = pick(a.seeds, file.seeds, vec![base.forest.seed]);
    let strategies = pick(a.strategies, file.strategies, vec![base.strategy]);
    let timestamps = pick(a.timestamps, file.timestamps, vec![300.0, 600.0, 900.0, 1200.0, 1500.0]);
    let plan = batch::Plan {
        base,
        strategies,
        seeds,
        timestamps,
        out: a.out.or(file.output_dir).unwrap_or_else(|| PathBuf::from("batch")),
        jobs: a.jobs,
    };
    let cells = batch::execute(&plan)?;
    let collided = cells.iter().any(|c| matches!(&c.outcome, Ok(m) if m.termination == Termination::Collision));
    Ok(if collided {
        EXIT_COLLISION
    } else if cells.iter().all(batch::Cell::ok) {
        0
    } else {
        EXIT_FAILED
    })
}

fn report(a: ReportArgs) -> Result<u8, CliError> {
    let mut dirs = Vec::new();
    for r in &a.runs {
        if !r.is_dir() {
            return Err(CliError::usage(format!("{}: not a directory", r.display())));
        }
        dirs.extend(report::find_runs(r));
    }
    if dirs.is_empty() {
        return Err(CliError::usage("no run directories (with summary.json) found"));
    }
    let runs = dirs.iter().map(|d| report::load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let rep = report::build(&runs)?;
    report::write(&rep, &a.out)?;
    println!("{} runs -> {}", runs.len(), a.out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenWorld(a) => gen_world(a),
        Cmd::Run(a) => run(a),
        Cmd::Batch(a) => batch(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
