//! Mission loop: sense, map, update frontiers, choose mode and target, move.
//!
//! Time advances in fixed steps of `dt`. Within a step the agents tick in
//! ascending id order; the map exchange runs afterwards as a barrier every
//! `sync_period`. Nothing here iterates a hash map, so a run is a pure
//! function of its configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordination::{exchange_and_sync, team_cost, Beacon, CoordinationParams, Message, SharedMap, TeamContext};
use crate::frontier::{ClusterLabel, FrontierMap, ViewpointParams};
use crate::grid_map::{Cell, CellState, VoxelGrid};
use crate::motion::{self, check_collision, AgentState};
use crate::planner::{
    select_mode, select_target_collector, select_target_explorer, speed_limit, string_pull, Candidate, DistanceField, Mode,
    PlannerConfig, PlanningSlice, Selection, StuckMonitor,
};
use crate::sensor::{render_depth_scan, DepthCamera, Pose};
use crate::world::{ForestParams, World};
use crate::{Error, Result, Vec3};

pub const SUMMARY_FORMAT: u32 = 1;
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Adaptive,
    FixedExplorer,
    SplitMapAdaptive,
    SplitMapFixed,
}

impl Strategy {
    pub fn fixed_mode(self) -> bool {
        matches!(self, Strategy::FixedExplorer | Strategy::SplitMapFixed)
    }

    pub fn split_map(self) -> bool {
        matches!(self, Strategy::SplitMapAdaptive | Strategy::SplitMapFixed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::FixedExplorer => "fixed_explorer",
            Strategy::SplitMapAdaptive => "split_map_adaptive",
            Strategy::SplitMapFixed => "split_map_fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionConfig {
    /// Ground-truth world file; when absent the world is generated from `forest`.
    pub world_file: Option<PathBuf>,
    pub forest: ForestParams,
    pub n_agents: usize,
    pub strategy: Strategy,
    pub resolution: f64,
    pub dt: f64,
    pub max_mission_time: f64,
    pub metric_sample_period: f64,
    pub safety_radius: f64,
    /// Obstacle inflation for planning; `0.3 + resolution * sqrt(2)` when absent.
    pub inflation_margin: Option<f64>,
    /// Flight altitude; half the world height when absent.
    pub flight_height: Option<f64>,
    /// Depth camera; derived from the resolution when absent.
    pub camera: Option<DepthCamera>,
    pub planner: PlannerConfig,
    pub coordination: CoordinationParams,
    pub viewpoints: ViewpointParams,
    /// Cluster size cap; the camera range when absent.
    pub frontier_max_extent: Option<f64>,
    /// Neighbour distance for trail classification; three cells when absent.
    pub neighbor_dist: Option<f64>,
    pub dead_strikes: u8,
    pub record_trajectory: bool,
    pub log_messages: bool,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            world_file: None,
            forest: ForestParams::default(),
            n_agents: 1,
            strategy: Strategy::Adaptive,
            resolution: 0.1,
            dt: 0.1,
            max_mission_time: 1500.0,
            metric_sample_period: 5.0,
            safety_radius: 0.3,
            inflation_margin: None,
            flight_height: None,
            camera: None,
            planner: PlannerConfig::default(),
            coordination: CoordinationParams::default(),
            viewpoints: ViewpointParams::default(),
            frontier_max_extent: None,
            neighbor_dist: None,
            dead_strikes: crate::frontier::DEFAULT_DEAD_STRIKES,
            record_trajectory: false,
            log_messages: false,
        }
    }
}

fn bad(key: &str, why: &str) -> Error {
    Error::InvalidConfig(format!("{key}: {why}"))
}

impl MissionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(bad("n_agents", "must be >= 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad("dt", "must be > 0"));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(bad("resolution", "must be > 0"));
        }
        if !(self.max_mission_time > 0.0) {
            return Err(bad("max_mission_time", "must be > 0"));
        }
        if !(self.metric_sample_period > 0.0) {
            return Err(bad("metric_sample_period", "must be > 0"));
        }
        if self.safety_radius < 0.0 {
            return Err(bad("safety_radius", "must be >= 0"));
        }
        if self.inflation_margin.is_some_and(|m| m < 0.0) {
            return Err(bad("inflation_margin", "must be >= 0"));
        }
        if self.dead_strikes < 1 {
            return Err(bad("dead_strikes", "must be >= 1"));
        }
        if self.frontier_max_extent.is_some_and(|m| m <= 0.0) {
            return Err(bad("frontier_max_extent", "must be > 0"));
        }
        if self.neighbor_dist.is_some_and(|m| m < 0.0) {
            return Err(bad("neighbor_dist", "must be >= 0"));
        }
        let vp = &self.viewpoints;
        if vp.n_angles < 1 || vp.n_radii < 1 || vp.max_samples < 1 || !(vp.r_min > 0.0 && vp.r_max >= vp.r_min) {
            return Err(bad("viewpoints", "need n_angles, n_radii, max_samples >= 1 and 0 < r_min <= r_max"));
        }
        if let Some(cam) = &self.camera {
            cam.validate().map_err(|e| bad("camera", &e.to_string()))?;
        }
        self.planner.validate()?;
        self.coordination.validate()?;
        if self.world_file.is_none() && self.n_agents > self.forest.n_spawns && !self.strategy.split_map() {
            return Err(bad("n_agents", "exceeds forest.n_spawns"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.forest.seed
    }

    pub fn load_world(&self) -> Result<World> {
        match &self.world_file {
            Some(p) => World::load(p),
            None => self.forest.generate(),
        }
    }

    pub fn camera(&self) -> DepthCamera {
        self.camera.clone().unwrap_or_else(|| DepthCamera::for_resolution(self.resolution))
    }

    pub fn inflation(&self) -> f64 {
        self.inflation_margin.unwrap_or(0.3 + self.resolution * std::f64::consts::SQRT_2)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of everything but the seed, shared by all cells of a batch.
    pub fn protocol_hash(&self) -> String {
        let mut c = self.clone();
        c.forest.seed = 0;
        c.hash()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Timeout,
    Collision,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSample {
    pub t: f64,
    /// Volume observed by this agent's own sensor.
    pub explored_m3: f64,
    /// Part of it no peer had shared beforehand.
    pub discovered_m3: f64,
    /// Volume known in this agent's map, including what peers shared.
    pub map_m3: f64,
    pub distance_m: f64,
    pub mean_v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamSample {
    pub t: f64,
    pub explored_m3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeChange {
    pub t: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentResult {
    pub id: usize,
    pub distance: f64,
    /// Sum of per-step displacements, kept separately as a cross-check.
    pub step_distance_sum: f64,
    pub active_time: f64,
    pub mean_velocity: f64,
    pub explored_m3: f64,
    pub discovered_m3: f64,
    pub map_m3: f64,
    pub coverage: Vec<CoverageSample>,
    pub mode_timeline: Vec<ModeChange>,
    pub collector_entries: usize,
    pub max_step_displacement: f64,
    /// Steps that moved farther than the active mode's speed limit allows.
    pub speed_cap_violations: usize,
    pub max_step_yaw: f64,
    pub min_clearance: f64,
    pub replans: usize,
    pub strikes: usize,
    pub dead_clusters: usize,
    pub live_trails: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub t: f64,
    pub agent: usize,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionResult {
    pub completed: bool,
    pub termination: Termination,
    /// Time at which the mission ended (completion, timeout or collision).
    pub completion_time: f64,
    pub agents: Vec<AgentResult>,
    pub team_coverage: Vec<TeamSample>,
    pub team_explored_m3: f64,
    pub collision_count: usize,
    pub collision: Option<CollisionReport>,
}

impl MissionResult {
    /// Team volume at `t`, holding the last sample before it.
    pub fn team_volume_at(&self, t: f64) -> f64 {
        self.team_coverage
            .iter()
            .take_while(|s| s.t <= t + 1e-9)
            .last()
            .map_or(0.0, |s| s.explored_m3)
    }

    pub fn mean_velocity(&self) -> f64 {
        self.agents.iter().map(|a| a.mean_velocity).sum::<f64>() / self.agents.len() as f64
    }

    pub fn total_distance(&self) -> f64 {
        self.agents.iter().map(|a| a.distance).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub speed: f64,
    pub mode: Mode,
    pub target: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub id: usize,
    pub distance_m: f64,
    pub mean_velocity: f64,
    pub active_time: f64,
    pub explored_m3: f64,
    pub discovered_m3: f64,
    pub map_m3: f64,
    pub collector_entries: usize,
    pub replans: usize,
    pub dead_clusters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionSummary {
    pub format: u32,
    pub seed: u64,
    pub config_hash: String,
    pub protocol_hash: String,
    pub strategy: Strategy,
    pub n_agents: usize,
    pub completed: bool,
    pub termination: Termination,
    pub completion_time: f64,
    pub team_explored_m3: f64,
    pub total_distance_m: f64,
    pub mean_velocity: f64,
    pub collision_count: usize,
    pub tree_count: usize,
    pub agents: Vec<AgentSummary>,
    pub config: MissionConfig,
}

impl MissionSummary {
    pub fn new(cfg: &MissionConfig, world: &World, r: &MissionResult) -> Self {
        Self {
            format: SUMMARY_FORMAT,
            seed: world.seed,
            config_hash: cfg.hash(),
            protocol_hash: cfg.protocol_hash(),
            strategy: cfg.strategy,
            n_agents: cfg.n_agents,
            completed: r.completed,
            termination: r.termination,
            completion_time: r.completion_time,
            team_explored_m3: r.team_explored_m3,
            total_distance_m: r.total_distance(),
            mean_velocity: r.mean_velocity(),
            collision_count: r.collision_count,
            tree_count: world.trees.len(),
            agents: r
                .agents
                .iter()
                .map(|a| AgentSummary {
                    id: a.id,
                    distance_m: a.distance,
                    mean_velocity: a.mean_velocity,
                    active_time: a.active_time,
                    explored_m3: a.explored_m3,
                    discovered_m3: a.discovered_m3,
                    map_m3: a.map_m3,
                    collector_entries: a.collector_entries,
                    replans: a.replans,
                    dead_clusters: a.dead_clusters,
                })
                .collect(),
            config: cfg.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Everything a finished mission produces.
#[derive(Clone, Debug)]
pub struct MissionOutput {
    pub result: MissionResult,
    pub summary: MissionSummary,
    pub trajectory: Vec<TrajectoryRecord>,
    pub messages: Vec<Message>,
}

impl MissionOutput {
    pub fn metrics_csv(&self) -> String {
        let s = &self.summary;
        let mut out = format!(
            "# sylva metrics v{METRICS_SCHEMA} seed={} config_hash={}\nt,agent,explored_m3,distance_m,mean_v\n",
            s.seed, s.config_hash
        );
        for a in &self.result.agents {
            for c in &a.coverage {
                let _ = writeln!(out, "{},{},{},{},{}", c.t, a.id, c.explored_m3, c.distance_m, c.mean_v);
            }
        }
        for c in &self.result.team_coverage {
            let (d, v) = self.result.agents.iter().fold((0.0, 0.0), |(d, v), a| {
                let s = a.coverage.iter().take_while(|x| x.t <= c.t + 1e-9).last();
                (d + s.map_or(0.0, |x| x.distance_m), v + s.map_or(0.0, |x| x.mean_v))
            });
            let n = self.result.agents.len() as f64;
            let _ = writeln!(out, "{},team,{},{},{}", c.t, c.explored_m3, d, v / n);
        }
        out
    }

    fn jsonl_header(&self, kind: &str) -> String {
        serde_json::json!({
            "kind": kind,
            "format": SUMMARY_FORMAT,
            "seed": self.summary.seed,
            "config_hash": self.summary.config_hash,
        })
        .to_string()
    }

    /// Writes `summary.json`, `metrics.csv`, `trajectory.jsonl` and, when
    /// messages were logged, `messages.jsonl`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), self.summary.to_json())?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let mut traj = self.jsonl_header("trajectory");
        traj.push('\n');
        for r in &self.trajectory {
            traj.push_str(&serde_json::to_string(r).expect("record serializes"));
            traj.push('\n');
        }
        fs::write(dir.join("trajectory.jsonl"), traj)?;
        if !self.messages.is_empty() {
            let mut msgs = self.jsonl_header("messages");
            msgs.push('\n');
            for m in &self.messages {
                msgs.push_str(&serde_json::to_string(m).expect("message serializes"));
                msgs.push('\n');
            }
            fs::write(dir.join("messages.jsonl"), msgs)?;
        }
        Ok(())
    }
}

/// Fixed per-mission quantities shared by all agents.
#[derive(Clone, Debug)]
struct Env {
    cfg: MissionConfig,
    world: World,
    camera: DepthCamera,
    margin: f64,
    flight_z: f64,
    tolerance: f64,
}

#[derive(Clone, Debug)]
struct Agent {
    state: AgentState,
    frontiers: FrontierMap,
    stuck: StuckMonitor,
    stuck_flag: bool,
    target_cluster: Option<u32>,
    target_cells: Vec<usize>,
    replan_due: bool,
    last_replan: f64,
    last_mode_switch: f64,
    done: bool,
    active_time: f64,
    last_sensed: Option<(Vec3, f64)>,
    team: TeamContext,
    timeline: Vec<ModeChange>,
    collector_entries: usize,
    coverage: Vec<CoverageSample>,
    step_distance_sum: f64,
    max_step: f64,
    speed_violations: usize,
    max_yaw_step: f64,
    min_clearance: f64,
    replans: usize,
    strikes: usize,
}

/// A mission in progress. Most callers want [`run_mission`]; the step API is
/// for instrumentation.
#[derive(Clone, Debug)]
pub struct Mission {
    env: Env,
    agents: Vec<Agent>,
    maps: Vec<SharedMap>,
    step_index: u64,
    steps_per_sync: u64,
    steps_per_sample: u64,
    team_series: Vec<TeamSample>,
    trajectory: Vec<TrajectoryRecord>,
    messages: Vec<Message>,
    termination: Option<Termination>,
    collision: Option<CollisionReport>,
}

/// Longest horizontal axis and the `n` equal slabs along it.
pub fn split_slabs(extent: &Vec3, n: usize) -> (usize, Vec<(Vec3, Vec3)>) {
    let axis = if extent.x >= extent.y { 0 } else { 1 };
    let w = extent[axis] / n as f64;
    let slabs = (0..n)
        .map(|k| {
            let mut lo = Vec3::zeros();
            let mut hi = *extent;
            lo[axis] = w * k as f64;
            hi[axis] = if k + 1 == n { extent[axis] } else { w * (k + 1) as f64 };
            (lo, hi)
        })
        .collect();
    (axis, slabs)
}

/// Spawn point for slab `k`: the first spawn shifted into the slab, nudged to
/// the nearest spot with at least `clearance` to every tree.
fn slab_spawn(world: &World, axis: usize, lo: &Vec3, hi: &Vec3, clearance: f64) -> Vec3 {
    let s0 = world.spawn_points.first().copied().unwrap_or(Vec3::new(2.0, world.extent.y / 2.0, world.extent.z / 2.0));
    let w = hi[axis] - lo[axis];
    let mut anchor = s0;
    anchor[axis] = lo[axis] + (s0[axis] - lo[axis]).rem_euclid(w).min(w / 2.0);
    let inside = |p: &Vec3| (0..2).all(|a| p[a] > lo[a] + 0.5 && p[a] < hi[a] - 0.5);
    for ring in 0..=40 {
        let r = 0.25 * ring as f64;
        let n = if ring == 0 { 1 } else { 8 * ring };
        for j in 0..n {
            let a = std::f64::consts::TAU * j as f64 / n as f64;
            let p = anchor + Vec3::new(r * a.cos(), r * a.sin(), 0.0);
            if inside(&p) && world.clearance(&p) >= clearance {
                return p;
            }
        }
    }
    anchor
}

fn nearest_free(slice: &PlanningSlice, p: &Vec3, reach: i32) -> Option<Cell> {
    let c0 = slice.cell_at(p)?;
    let mut best: Option<(i32, Cell)> = None;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let c = [c0[0] + dx, c0[1] + dy, 0];
            if slice.grid().get(c) == Some(CellState::Free) {
                let d = dx * dx + dy * dy;
                if best.is_none_or(|(bd, bc)| d < bd || (d == bd && c < bc)) {
                    best = Some((d, c));
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

fn horizontal_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let (px, py) = (p.x - a.x, p.y - a.y);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (px - t * dx).hypot(py - t * dy)
}

/// True when a newly Occupied cell near flight height sits within `margin` of
/// the remaining path.
fn path_blocked(grid: &VoxelGrid, changed: &[usize], state: &AgentState, margin: f64, flight_z: f64) -> bool {
    if state.path.is_empty() {
        return false;
    }
    let band = 1.5 * grid.resolution();
    changed.iter().any(|&i| {
        if grid.state(i) != CellState::Occupied {
            return false;
        }
        let p = grid.cell_to_world(grid.cell(i));
        if (p.z - flight_z).abs() > band {
            return false;
        }
        let mut a = state.position;
        state.path.iter().any(|b| {
            let hit = horizontal_segment_distance(&p, &a, b) < margin;
            a = *b;
            hit
        })
    })
}

impl Agent {
    fn new(id: usize, position: Vec3, frontiers: FrontierMap, cfg: &MissionConfig) -> Self {
        Self {
            state: AgentState::new(id, position, 0.0),
            frontiers,
            stuck: StuckMonitor::new(cfg.planner.stuck_window, cfg.planner.stuck_displacement),
            stuck_flag: false,
            target_cluster: None,
            target_cells: Vec::new(),
            replan_due: true,
            last_replan: f64::NEG_INFINITY,
            last_mode_switch: f64::NEG_INFINITY,
            done: false,
            active_time: 0.0,
            last_sensed: None,
            team: TeamContext { self_id: id, peers: Vec::new() },
            timeline: vec![ModeChange { t: 0.0, mode: Mode::Explorer }],
            collector_entries: 0,
            coverage: Vec::new(),
            step_distance_sum: 0.0,
            max_step: 0.0,
            speed_violations: 0,
            max_yaw_step: 0.0,
            min_clearance: f64::INFINITY,
            replans: 0,
            strikes: 0,
        }
    }

    fn clear_target(&mut self) {
        self.state.target = None;
        self.state.path.clear();
        self.target_cluster = None;
        self.target_cells.clear();
    }

    fn sense(&mut self, map: &mut SharedMap, env: &Env) -> Vec<usize> {
        let pose = (self.state.position, self.state.yaw);
        if self.last_sensed == Some(pose) {
            return Vec::new();
        }
        self.last_sensed = Some(pose);
        let scan = render_depth_scan(&env.world, &Pose::new(pose.0, pose.1), &env.camera);
        let changed = map.integrate_scan(&scan);
        self.frontiers.update(map.map(), &changed);
        changed
    }

    fn absorb(&mut self, map: &SharedMap, changed: &[usize], env: &Env) {
        if path_blocked(map.map(), changed, &self.state, env.margin, env.flight_z) {
            self.replan_due = true;
        }
    }

    fn set_mode(&mut self, mode: Mode, t: f64) {
        if mode != self.state.mode {
            self.state.mode = mode;
            self.last_mode_switch = t;
            self.timeline.push(ModeChange { t, mode });
            if mode == Mode::Collector {
                self.collector_entries += 1;
            }
        }
    }

    fn replan(&mut self, map: &SharedMap, env: &Env, t: f64) {
        self.replans += 1;
        self.last_replan = t;
        self.replan_due = false;
        let stuck = std::mem::take(&mut self.stuck_flag);
        self.stuck.reset();
        let grid = map.map();
        self.frontiers.recluster(grid);
        let live = self.frontiers.live_ids();
        if live.is_empty() {
            self.done = true;
            self.clear_target();
            return;
        }
        self.done = false;

        let slice = PlanningSlice::build(grid, env.flight_z, env.margin);
        let Some(here) = slice.cell_at(&self.state.position) else {
            self.clear_target();
            return;
        };
        let mut prefix = Vec::new();
        let mut start = here;
        if slice.grid().get(here) != Some(CellState::Free) {
            let trial = DistanceField::compute(slice.grid(), here);
            let boxed = crate::grid_map::neighbor_offsets_26()
                .filter(|o| o[2] == 0)
                .all(|o| trial.cost([here[0] + o[0], here[1] + o[1], 0]).is_none());
            if boxed {
                if let Some(c) = nearest_free(&slice, &self.state.position, (1.0 / grid.resolution()).ceil() as i32) {
                    prefix.push(slice.waypoint(c));
                    start = c;
                }
            }
        }
        let field = DistanceField::compute(slice.grid(), start);
        let offset = prefix.first().map_or(0.0, |w: &Vec3| (w - self.state.position).norm());
        let recent: BTreeSet<u32> = self.frontiers.touched().iter().copied().collect();

        let mut cands: Vec<Candidate> = Vec::new();
        let mut unselectable = Vec::new();
        let mut trail_centroids = Vec::new();
        let reachable = |p: &Vec3| {
            slice.cell_at(p).is_some_and(|c| slice.grid().get(c) == Some(CellState::Free) && field.cost(c).is_some())
        };
        for id in live {
            let label = self.frontiers.label(grid, id);
            let vp = self.frontiers.viewpoint(grid, id, &env.camera, &env.cfg.viewpoints, Some(env.flight_z), reachable);
            match vp {
                Some(vp) => {
                    let cell = slice.cell_at(&vp.position).expect("valid viewpoint lies in the slice");
                    if label == ClusterLabel::Trail {
                        trail_centroids.push(self.frontiers.cluster(id).expect("live cluster").centroid);
                    }
                    cands.push(Candidate {
                        cluster_id: id,
                        viewpoint: vp,
                        label,
                        path_length: offset + field.length(cell).expect("reachable"),
                        team_cost: 0.0,
                        recent: recent.contains(&id),
                    });
                }
                None => unselectable.push(id),
            }
        }
        if cands.is_empty() {
            for id in unselectable {
                self.strikes += 1;
                self.frontiers.strike(id);
            }
            self.done = self.frontiers.live_count() == 0;
            self.clear_target();
            return;
        }

        let planner = &env.cfg.planner;
        let proposed =
            if env.cfg.strategy.fixed_mode() { Mode::Explorer } else { select_mode(&self.state.position, &trail_centroids, planner) };
        let dwell = t - self.last_mode_switch < planner.replan_period - 1e-9;
        let mut mode = if dwell && !(self.state.mode == Mode::Collector && trail_centroids.is_empty()) {
            self.state.mode
        } else {
            proposed
        };
        if mode == Mode::Collector && trail_centroids.is_empty() {
            mode = Mode::Explorer;
        }
        for c in &mut cands {
            c.team_cost = team_cost(&c.viewpoint.position, &self.state.position, mode, &self.team, &env.cfg.coordination);
        }
        self.set_mode(mode, t);
        let choice = match mode {
            Mode::Collector => select_target_collector(&cands, &self.state, &planner.weights, &planner.limits),
            Mode::Explorer => select_target_explorer(&cands, &self.state, &planner.weights, stuck).map(|(c, _): (_, Selection)| c),
        };
        let Some(choice) = choice.cloned() else {
            self.clear_target();
            return;
        };
        let goal = slice.cell_at(&choice.viewpoint.position).expect("valid viewpoint lies in the slice");
        let cells = field.path_to(goal).expect("reachable");
        let pulled = string_pull(slice.grid(), &cells);
        let mut path = prefix;
        path.extend(pulled.iter().skip(1).map(|&c| slice.waypoint(c)));
        path.pop();
        path.push(choice.viewpoint.position);
        self.state.path = path;
        self.state.target = Some(choice.viewpoint);
        self.target_cluster = Some(choice.cluster_id);
        self.target_cells = self.frontiers.cluster(choice.cluster_id).expect("live cluster").cells.clone();
    }

    fn sample(&mut self, map: &SharedMap, t: f64) {
        if self.coverage.last().is_some_and(|s| s.t == t) {
            return;
        }
        let d = self.state.distance_travelled;
        self.coverage.push(CoverageSample {
            t,
            explored_m3: map.own_explored_volume(),
            discovered_m3: map.discovered_volume(),
            map_m3: map.map().coverage().explored_volume,
            distance_m: d,
            mean_v: if self.active_time > 0.0 { d / self.active_time } else { 0.0 },
        });
    }
}

impl Mission {
    pub fn new(cfg: MissionConfig, world: World) -> Result<Self> {
        cfg.validate()?;
        world.validate()?;
        let camera = cfg.camera();
        let flight_z = cfg.flight_height.unwrap_or(world.extent.z / 2.0);
        if !(flight_z > 0.0 && flight_z < world.extent.z) {
            return Err(bad("flight_height", "must lie inside the world"));
        }
        let max_extent = cfg.frontier_max_extent.unwrap_or(camera.max_range);
        let neighbor_dist = cfg.neighbor_dist.unwrap_or(3.0 * cfg.resolution);
        let n = cfg.n_agents;

        let mut layout: Vec<(Vec3, VoxelGrid)> = Vec::with_capacity(n);
        if cfg.strategy.split_map() {
            let (axis, slabs) = split_slabs(&world.extent, n);
            for (lo, hi) in &slabs {
                let mut p = slab_spawn(&world, axis, lo, hi, 1.0);
                p.z = flight_z;
                layout.push((p, VoxelGrid::covering(*lo, *hi, cfg.resolution)?));
            }
        } else {
            if world.spawn_points.len() < n {
                return Err(bad("n_agents", "world has fewer spawn points than agents"));
            }
            let grid = VoxelGrid::covering(Vec3::zeros(), world.extent, cfg.resolution)?;
            for s in &world.spawn_points[..n] {
                layout.push((Vec3::new(s.x, s.y, flight_z), grid.clone()));
            }
        }
        let mut agents = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for (id, (p, grid)) in layout.into_iter().enumerate() {
            let fm = FrontierMap::new(&grid, max_extent, neighbor_dist).with_dead_strikes(cfg.dead_strikes);
            agents.push(Agent::new(id, p, fm, &cfg));
            maps.push(SharedMap::new(grid));
        }
        let dt = cfg.dt;
        let steps_per = |period: f64| ((period / dt).round() as u64).max(1);
        let env = Env { tolerance: cfg.resolution, margin: cfg.inflation(), camera, flight_z, world, cfg };
        let mut m = Self {
            steps_per_sync: steps_per(env.cfg.coordination.sync_period),
            steps_per_sample: steps_per(env.cfg.metric_sample_period),
            env,
            agents,
            maps,
            step_index: 0,
            team_series: Vec::new(),
            trajectory: Vec::new(),
            messages: Vec::new(),
            termination: None,
            collision: None,
        };
        for (a, map) in m.agents.iter_mut().zip(m.maps.iter_mut()) {
            a.sense(map, &m.env);
        }
        m.exchange();
        m.record_trajectory();
        m.sample();
        Ok(m)
    }

    pub fn config(&self) -> &MissionConfig {
        &self.env.cfg
    }

    pub fn world(&self) -> &World {
        &self.env.world
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.env.cfg.dt
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &AgentState {
        &self.agents[i].state
    }

    pub fn shared_map(&self, i: usize) -> &SharedMap {
        &self.maps[i]
    }

    pub fn frontiers(&self, i: usize) -> &FrontierMap {
        &self.agents[i].frontiers
    }

    pub fn flight_height(&self) -> f64 {
        self.env.flight_z
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    /// Whether the next [`Mission::step`] ends with a map exchange.
    pub fn sync_due_next(&self) -> bool {
        self.exchanges() && (self.step_index + 1) % self.steps_per_sync == 0
    }

    fn exchanges(&self) -> bool {
        self.agents.len() > 1 && !self.env.cfg.strategy.split_map()
    }

    /// Union of all agents' knowledge on a grid covering the whole world.
    pub fn team_map(&self) -> VoxelGrid {
        if !self.env.cfg.strategy.split_map() {
            let mut out = self.maps[0].map().clone();
            for m in &self.maps[1..] {
                out.merge_from(m.map()).expect("team maps share geometry");
            }
            return out;
        }
        let mut out =
            VoxelGrid::covering(Vec3::zeros(), self.env.world.extent, self.env.cfg.resolution).expect("valid geometry");
        for m in &self.maps {
            let g = m.map();
            for (i, s) in g.cells().iter().enumerate() {
                if s.is_known() {
                    let c = out.cell_of(&g.cell_to_world(g.cell(i)));
                    if let Some(j) = out.index(c) {
                        out.raise(j, *s);
                    }
                }
            }
        }
        out
    }

    fn team_volume(&self) -> f64 {
        if self.env.cfg.strategy.split_map() || self.maps.len() == 1 {
            return self.maps.iter().map(|m| m.map().coverage().explored_volume).sum();
        }
        let n = self.maps[0].map().len();
        let known = (0..n).filter(|&i| self.maps.iter().any(|m| m.map().state(i).is_known())).count();
        known as f64 * self.env.cfg.resolution.powi(3)
    }

    fn sample(&mut self) {
        let t = self.time();
        if self.team_series.last().is_some_and(|s| s.t == t) {
            return;
        }
        for (a, m) in self.agents.iter_mut().zip(&self.maps) {
            a.sample(m, t);
        }
        let v = self.team_volume();
        self.team_series.push(TeamSample { t, explored_m3: v });
    }

    fn record_trajectory(&mut self) {
        if !self.env.cfg.record_trajectory {
            return;
        }
        let t = self.time();
        for a in &self.agents {
            let s = &a.state;
            self.trajectory.push(TrajectoryRecord {
                t,
                agent: s.id,
                x: s.position.x,
                y: s.position.y,
                z: s.position.z,
                yaw: s.yaw,
                speed: s.speed(),
                mode: s.mode,
                target: s.target.map(|v| [v.position.x, v.position.y, v.position.z]),
            });
        }
    }

    fn exchange(&mut self) {
        if !self.exchanges() {
            return;
        }
        let beacons: Vec<Beacon> = self
            .agents
            .iter()
            .map(|a| Beacon { position: a.state.position, mode: a.state.mode, goal: a.state.target.map(|v| v.position) })
            .collect();
        let t = self.time();
        let report = exchange_and_sync(&mut self.maps, &beacons, &self.env.cfg.coordination, t, self.env.cfg.log_messages);
        for (i, (a, mut team)) in self.agents.iter_mut().zip(report.teams).enumerate() {
            a.frontiers.update(self.maps[i].map(), &report.changed[i]);
            a.absorb(&self.maps[i], &report.changed[i], &self.env);
            // goal conflicts are resolved by id: only lower ids keep their claim
            for p in &mut team.peers {
                if p.id > i {
                    p.goal = None;
                }
            }
            a.team = team;
        }
        self.messages.extend(report.messages);
    }

    fn tick_agent(&mut self, i: usize, t: f64) {
        let env = &self.env;
        let a = &mut self.agents[i];
        let map = &mut self.maps[i];
        let periodic = t - a.last_replan >= env.cfg.planner.replan_period - 1e-9;
        if a.done {
            if periodic && a.frontiers.has_pending() {
                a.replan(map, env, t);
            }
        } else if a.replan_due || periodic {
            a.replan(map, env, t);
        }

        let dt = env.cfg.dt;
        let out = if a.state.target.is_some() {
            Some(motion::step(&mut a.state, dt, &env.cfg.planner.limits, env.tolerance))
        } else {
            a.state.velocity = Vec3::zeros();
            None
        };
        if let Some(o) = &out {
            a.step_distance_sum += o.displacement;
            a.max_step = a.max_step.max(o.displacement);
            if o.displacement > speed_limit(a.state.mode, &env.cfg.planner.limits) * dt + 1e-9 {
                a.speed_violations += 1;
            }
            a.max_yaw_step = a.max_yaw_step.max(o.yaw_change);
        }
        if !a.done {
            a.active_time += dt;
        }
        let pos = a.state.position;
        a.min_clearance = a.min_clearance.min(env.world.clearance(&pos));
        if check_collision(&pos, &env.world, env.cfg.safety_radius) && self.collision.is_none() {
            self.collision = Some(CollisionReport { t: t + dt, agent: i, position: [pos.x, pos.y, pos.z] });
        }
        if a.state.path.is_empty() {
            a.stuck.reset();
        } else {
            a.stuck.record(t + dt, pos);
            if a.stuck.is_stuck() {
                a.stuck_flag = true;
                a.replan_due = true;
            }
        }

        let changed = a.sense(map, env);
        a.absorb(map, &changed, env);
        if out.is_some_and(|o| o.arrived) {
            if let Some(id) = a.target_cluster {
                if a.target_cells.iter().all(|&c| a.frontiers.is_frontier(c)) {
                    a.strikes += 1;
                    a.frontiers.strike(id);
                }
            }
            a.clear_target();
            a.replan_due = true;
        } else if a.target_cluster.is_some() && a.target_cells.iter().all(|&c| !a.frontiers.is_frontier(c)) {
            a.replan_due = true;
        }
    }

    /// Advances one time step. Returns the termination reason once the
    /// mission has ended; further calls are no-ops.
    pub fn step(&mut self) -> Option<Termination> {
        self.step_with(|_| {})
    }

    /// Like [`Mission::step`], calling `before_sync` after the agent ticks and
    /// before any map exchange of this step.
    pub fn step_with(&mut self, mut before_sync: impl FnMut(&Mission)) -> Option<Termination> {
        if self.termination.is_some() {
            return self.termination;
        }
        let t = self.time();
        for i in 0..self.agents.len() {
            self.tick_agent(i, t);
        }
        self.step_index += 1;
        before_sync(self);
        if self.exchanges() && self.step_index % self.steps_per_sync == 0 {
            self.exchange();
        }
        self.record_trajectory();
        if self.step_index % self.steps_per_sample == 0 {
            self.sample();
        }
        let now = self.time();
        self.termination = if self.collision.is_some() {
            Some(Termination::Collision)
        } else if self.agents.iter().all(|a| a.done) {
            Some(Termination::Completed)
        } else if now >= self.env.cfg.max_mission_time - 1e-9 {
            Some(Termination::Timeout)
        } else {
            None
        };
        if self.termination.is_some() {
            self.sample();
        }
        self.termination
    }

    pub fn run_to_end(&mut self) -> Termination {
        loop {
            if let Some(t) = self.step() {
                return t;
            }
        }
    }

    pub fn result(&self) -> MissionResult {
        let termination = self.termination.unwrap_or(Termination::Timeout);
        let agents = self
            .agents
            .iter()
            .zip(&self.maps)
            .map(|(a, m)| {
                let live_trails = a
                    .frontiers
                    .clusters()
                    .filter(|c| !c.dead && c.label == ClusterLabel::Trail)
                    .count();
                AgentResult {
                    id: a.state.id,
                    distance: a.state.distance_travelled,
                    step_distance_sum: a.step_distance_sum,
                    active_time: a.active_time,
                    mean_velocity: if a.active_time > 0.0 { a.state.distance_travelled / a.active_time } else { 0.0 },
                    explored_m3: m.own_explored_volume(),
                    discovered_m3: m.discovered_volume(),
                    map_m3: m.map().coverage().explored_volume,
                    coverage: a.coverage.clone(),
                    mode_timeline: a.timeline.clone(),
                    collector_entries: a.collector_entries,
                    max_step_displacement: a.max_step,
                    speed_cap_violations: a.speed_violations,
                    max_step_yaw: a.max_yaw_step,
                    min_clearance: a.min_clearance,
                    replans: a.replans,
                    strikes: a.strikes,
                    dead_clusters: a.frontiers.dead_count(),
                    live_trails,
                }
            })
            .collect();
        MissionResult {
            completed: termination == Termination::Completed,
            termination,
            completion_time: self.time(),
            agents,
            team_coverage: self.team_series.clone(),
            team_explored_m3: self.team_series.last().map_or(0.0, |s| s.explored_m3),
            collision_count: usize::from(self.collision.is_some()),
            collision: self.collision.clone(),
        }
    }

    /// Runs to the end and packages the result with its logs.
    pub fn finish(mut self) -> MissionOutput {
        self.run_to_end();
        let result = self.result();
        let summary = MissionSummary::new(&self.env.cfg, &self.env.world, &result);
        MissionOutput { result, summary, trajectory: self.trajectory, messages: self.messages }
    }
}

/// Runs one mission with the configured strategy.
pub fn run_mission(cfg: &MissionConfig) -> Result<MissionOutput> {
    let world = cfg.load_world()?;
    Ok(Mission::new(cfg.clone(), world)?.finish())
}

/// The same loop with the mode forced to Explorer.
pub fn run_fixed_mode_baseline(cfg: &MissionConfig) -> Result<MissionOutput> {
    let mut c = cfg.clone();
    c.strategy = if c.strategy.split_map() { Strategy::SplitMapFixed } else { Strategy::FixedExplorer };
    run_mission(&c)
}

/// Equal slabs, one per agent, no communication.
pub fn run_split_map(cfg: &MissionConfig) -> Result<MissionOutput> {
    let mut c = cfg.clone();
    c.strategy = if c.strategy.fixed_mode() { Strategy::SplitMapFixed } else { Strategy::SplitMapAdaptive };
    run_mission(&c)
}
