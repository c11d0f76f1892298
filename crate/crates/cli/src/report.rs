//! Plot-ready series across the runs of one protocol.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sylva_core::simulation::MissionSummary;

use crate::stats::mean_std;
use crate::CliError;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub explored_m3: f64,
    pub distance_m: f64,
}

#[derive(Clone, Debug)]
pub struct RunData {
    pub dir: PathBuf,
    pub summary: MissionSummary,
    pub team: Vec<Sample>,
    pub agents: Vec<Vec<Sample>>,
}

/// Run directories under `root` (itself included), sorted.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    if root.join("summary.json").is_file() {
        return vec![root.to_path_buf()];
    }
    let Ok(entries) = std::fs::read_dir(root) else { return Vec::new() };
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    subdirs.iter().flat_map(|d| find_runs(d)).collect()
}

fn bad_file(path: &Path, why: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {why}", path.display()))
}

pub fn parse_metrics(text: &str, n_agents: usize) -> Result<(Vec<Sample>, Vec<Vec<Sample>>), String> {
    let mut team = Vec::new();
    let mut agents = vec![Vec::new(); n_agents];
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some("t,agent,explored_m3,distance_m,mean_v") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(format!("row {}: expected 5 fields", k + 1));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", k + 1));
        let s = Sample { t: num(f[0])?, explored_m3: num(f[2])?, distance_m: num(f[3])? };
        if f[1] == "team" {
            team.push(s);
        } else {
            let a: usize = f[1].parse().map_err(|_| format!("row {}: bad agent `{}`", k + 1, f[1]))?;
            agents.get_mut(a).ok_or_else(|| format!("row {}: agent {a} out of range", k + 1))?.push(s);
        }
    }
    Ok((team, agents))
}

pub fn load_run(dir: &Path) -> Result<RunData, CliError> {
    let sp = dir.join("summary.json");
    let text = std::fs::read_to_string(&sp).map_err(|e| bad_file(&sp, e))?;
    let summary: MissionSummary = serde_json::from_str(&text).map_err(|e| bad_file(&sp, e))?;
    let mp = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&mp).map_err(|e| bad_file(&mp, e))?;
    let (team, agents) = parse_metrics(&text, summary.n_agents).map_err(|e| bad_file(&mp, e))?;
    Ok(RunData { dir: dir.to_path_buf(), summary, team, agents })
}

/// Last sample at or before `t`; the first sample before the series starts.
fn at(series: &[Sample], t: f64) -> Sample {
    let k = series.partition_point(|s| s.t <= t + 1e-9);
    series[k.saturating_sub(1)]
}

pub struct Report {
    pub rate: String,
    pub velocity: String,
    pub balance: String,
}

pub fn build(runs: &[RunData]) -> Result<Report, CliError> {
    let first = runs.first().ok_or_else(|| CliError::usage("no runs to report"))?;
    let hash = &first.summary.protocol_hash;
    if let Some(r) = runs.iter().find(|r| &r.summary.protocol_hash != hash) {
        return Err(CliError::usage(format!(
            "config mismatch: {} and {} were run with different configs",
            first.dir.display(),
            r.dir.display()
        )));
    }
    if let Some(r) = runs.iter().find(|r| r.team.is_empty()) {
        return Err(bad_file(&r.dir.join("metrics.csv"), "no team samples"));
    }
    let mut grid: Vec<f64> = runs.iter().flat_map(|r| r.team.iter().map(|s| s.t)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let seeds: Vec<String> = runs.iter().map(|r| r.summary.seed.to_string()).collect();
    let head = format!("# sylva report v{REPORT_SCHEMA} protocol_hash={hash} seeds={}\n", seeds.join(";"));
    let n_agents = first.summary.n_agents as f64;

    let mut rate = head.clone() + "t,explored_m3_mean,explored_m3_std,rate_m3_per_s_mean,rate_m3_per_s_std\n";
    let mut velocity = head.clone() + "t,speed_mean,speed_std\n";
    let mut balance = head;
    let cols: Vec<String> = (0..first.summary.n_agents)
        .map(|a| format!("agent{a}_explored_m3_mean,agent{a}_explored_m3_std"))
        .collect();
    let _ = writeln!(balance, "t,{}", cols.join(","));

    for (k, &t) in grid.iter().enumerate() {
        let prev = if k == 0 { None } else { Some(grid[k - 1]) };
        let now: Vec<Sample> = runs.iter().map(|r| at(&r.team, t)).collect();
        let (vm, vs) = mean_std(&now.iter().map(|s| s.explored_m3).collect::<Vec<_>>());
        let (rates, speeds): (Vec<f64>, Vec<f64>) = match prev {
            None => (vec![0.0; runs.len()], vec![0.0; runs.len()]),
            Some(p) => runs
                .iter()
                .zip(&now)
                .map(|(r, s)| {
                    let b = at(&r.team, p);
                    let dt = t - p;
                    ((s.explored_m3 - b.explored_m3) / dt, (s.distance_m - b.distance_m) / (dt * n_agents))
                })
                .unzip(),
        };
        let (rm, rs) = mean_std(&rates);
        let (sm, ss) = mean_std(&speeds);
        let _ = writeln!(rate, "{t},{vm},{vs},{rm},{rs}");
        let _ = writeln!(velocity, "{t},{sm},{ss}");
        let _ = write!(balance, "{t}");
        for a in 0..first.summary.n_agents {
            let xs: Vec<f64> = runs.iter().filter(|r| !r.agents[a].is_empty()).map(|r| at(&r.agents[a], t).explored_m3).collect();
            let (m, s) = mean_std(&xs);
            let _ = write!(balance, ",{m},{s}");
        }
        balance.push('\n');
    }
    Ok(Report { rate, velocity, balance })
}

pub fn write(report: &Report, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::failed(format!("{}: {e}", out.display())))?;
    for (name, text) in [("rate.csv", &report.rate), ("velocity.csv", &report.velocity), ("balance.csv", &report.balance)] {
        std::fs::write(out.join(name), text).map_err(|e| CliError::failed(format!("{name}: {e}")))?;
    }
    Ok(())
}
