//! Seeded batches: every (strategy, seed) cell runs one mission, then the
//! cells are aggregated per strategy.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sylva_core::simulation::{run_mission, MissionConfig, Strategy, Termination};

use crate::stats::mean_std;
use crate::CliError;

pub const BATCH_SCHEMA: u32 = 1;

#[derive(Clone, Debug)]
pub struct Cell {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub protocol_hash: String,
    pub outcome: Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub termination: Termination,
    pub completion_time: f64,
    pub distance_m: f64,
    pub mean_velocity: f64,
    pub team_m3: f64,
    /// Team volume at each requested timestamp.
    pub volumes: Vec<f64>,
}

impl Cell {
    /// A cell fails when the mission could not run or ended in a collision.
    /// Timeouts are a normal outcome for capped missions.
    pub fn ok(&self) -> bool {
        matches!(&self.outcome, Ok(m) if m.termination != Termination::Collision)
    }
}

pub struct Plan {
    pub base: MissionConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub timestamps: Vec<f64>,
    pub out: PathBuf,
    pub jobs: usize,
}

fn cell_dir(out: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    out.join(strategy.name()).join(format!("seed_{seed}"))
}

fn run_cell(plan: &Plan, strategy: Strategy, seed: u64) -> Cell {
    let mut cfg = plan.base.clone();
    cfg.strategy = strategy;
    cfg.forest.seed = seed;
    let outcome = run_mission(&cfg).map_err(|e| e.to_string()).and_then(|out| {
        out.write_artifacts(&cell_dir(&plan.out, strategy, seed)).map_err(|e| e.to_string())?;
        let r = &out.result;
        Ok(CellMetrics {
            termination: r.termination,
            completion_time: r.completion_time,
            distance_m: r.total_distance(),
            mean_velocity: r.mean_velocity(),
            team_m3: r.team_explored_m3,
            volumes: plan.timestamps.iter().map(|&t| r.team_volume_at(t)).collect(),
        })
    });
    Cell { strategy, seed, config_hash: cfg.hash(), protocol_hash: cfg.protocol_hash(), outcome }
}

/// Runs all cells, `plan.jobs` at a time. Cells come back in (strategy, seed)
/// order regardless of scheduling.
pub fn run(plan: &Plan) -> Vec<Cell> {
    let work: Vec<(Strategy, u64)> =
        plan.strategies.iter().flat_map(|&s| plan.seeds.iter().map(move |&seed| (s, seed))).collect();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; work.len()]);
    std::thread::scope(|scope| {
        for _ in 0..plan.jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(s, seed)) = work.get(i) else { break };
                let cell = run_cell(plan, s, seed);
                eprintln!("{} seed {}: {}", s.name(), seed, describe(&cell));
                done.lock().unwrap()[i] = Some(cell);
            });
        }
    });
    done.into_inner().unwrap().into_iter().map(|c| c.expect("every cell ran")).collect()
}

fn describe(c: &Cell) -> String {
    match &c.outcome {
        Ok(m) => format!("{:?} at {:.1} s, {:.1} m3", m.termination, m.completion_time, m.team_m3),
        Err(e) => format!("failed: {e}"),
    }
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Completed => "completed",
        Termination::Timeout => "timeout",
        Termination::Collision => "collision",
    }
}

fn volume_columns(timestamps: &[f64]) -> Vec<String> {
    timestamps.iter().map(|t| format!("volume_{t}s_m3")).collect()
}

pub fn cells_csv(cells: &[Cell], timestamps: &[f64]) -> String {
    let mut out = format!("# sylva batch cells v{BATCH_SCHEMA}\n");
    let mut header = vec!["strategy", "seed", "config_hash", "status", "completion_time_s", "distance_m", "mean_velocity", "team_m3"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(volume_columns(timestamps));
    out.push_str(&header.join(","));
    out.push('\n');
    for c in cells {
        let _ = write!(out, "{},{},{}", c.strategy.name(), c.seed, c.config_hash);
        match &c.outcome {
            Ok(m) => {
                let _ = write!(
                    out,
                    ",{},{},{},{},{}",
                    termination_name(m.termination),
                    m.completion_time,
                    m.distance_m,
                    m.mean_velocity,
                    m.team_m3
                );
                for v in &m.volumes {
                    let _ = write!(out, ",{v}");
                }
            }
            Err(e) => {
                let _ = write!(out, ",error: {}", e.replace([',', '\n'], " "));
                out.push_str(&",".repeat(4 + timestamps.len()));
            }
        }
        out.push('\n');
    }
    out
}

/// One row per strategy with mean and sample standard deviation over the
/// cells that produced metrics.
pub fn aggregate_csv(cells: &[Cell], strategies: &[Strategy], timestamps: &[f64]) -> String {
    let mut out = format!("# sylva batch aggregate v{BATCH_SCHEMA}\n");
    let mut header = vec!["strategy".to_string(), "protocol_hash".into(), "runs".into(), "completed".into()];
    for name in ["completion_time_s", "distance_m", "mean_velocity", "team_m3"]
        .into_iter()
        .map(String::from)
        .chain(volume_columns(timestamps))
    {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for &s in strategies {
        let mine: Vec<&Cell> = cells.iter().filter(|c| c.strategy == s).collect();
        let metrics: Vec<&CellMetrics> = mine.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
        let completed = metrics.iter().filter(|m| m.termination == Termination::Completed).count();
        let hash = mine.first().map_or("", |c| c.protocol_hash.as_str());
        let _ = write!(out, "{},{hash},{},{completed}", s.name(), metrics.len());
        let mut columns: Vec<Vec<f64>> = vec![
            metrics.iter().map(|m| m.completion_time).collect(),
            metrics.iter().map(|m| m.distance_m).collect(),
            metrics.iter().map(|m| m.mean_velocity).collect(),
            metrics.iter().map(|m| m.team_m3).collect(),
        ];
        for k in 0..timestamps.len() {
            columns.push(metrics.iter().map(|m| m.volumes[k]).collect());
        }
        for col in columns {
            let (m, sd) = mean_std(&col);
            let _ = write!(out, ",{m},{sd}");
        }
        out.push('\n');
    }
    out
}

pub fn execute(plan: &Plan) -> Result<Vec<Cell>, CliError> {
    std::fs::create_dir_all(&plan.out).map_err(|e| CliError::failed(format!("{}: {e}", plan.out.display())))?;
    let cells = run(plan);
    let write = |name: &str, text: String| {
        std::fs::write(plan.out.join(name), text).map_err(|e| CliError::failed(format!("{name}: {e}")))
    };
    write("cells.csv", cells_csv(&cells, &plan.timestamps))?;
    let aggregate = aggregate_csv(&cells, &plan.strategies, &plan.timestamps);
    write("aggregate.csv", aggregate.clone())?;
    print!("{aggregate}");
    Ok(cells)
}
