//! Target selection and grid path planning.
//!
//! Edge costs are integers so that path lengths compare exactly: an axis step
//! costs 1 000 000 units, a planar diagonal 1 414 214 and a space diagonal
//! 1 732 051 (the rounded multiples of 1, sqrt 2 and sqrt 3). A path length in
//! meters is `cost * 1e-6 * resolution`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::frontier::{ClusterLabel, Viewpoint};
use crate::grid_map::{Cell, CellState, VoxelGrid};
use crate::motion::AgentState;
use crate::{angle_diff, Error, Result, Vec3};

pub const COST_AXIS: u64 = 1_000_000;
pub const COST_DIAG2: u64 = 1_414_214;
pub const COST_DIAG3: u64 = 1_732_051;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Explorer,
    Collector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub w_d: f64,
    pub w_v: f64,
    pub w_l: f64,
    pub p_trail: f64,
    pub w_p: f64,
    pub w_a: f64,
    /// Weight of the team term; unused by a lone agent.
    pub w_f: f64,
    pub d_max: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w_d: 1.0, w_v: 3.0, w_l: 1.0, p_trail: 10.0, w_p: 1.0, w_a: 1.0, w_f: 1.0, d_max: 15.0 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_d, self.w_v, self.w_l, self.p_trail, self.w_p, self.w_a, self.w_f];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("planner.weights must be finite and >= 0".into()));
        }
        if self.w_d <= 0.0 && self.w_v <= 0.0 {
            return Err(Error::InvalidConfig("planner.weights: one of w_d, w_v must be > 0".into()));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::InvalidConfig("planner.weights.d_max must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicLimits {
    pub v_max: f64,
    pub yaw_rate_max: f64,
    pub collector_speed_factor: f64,
}

impl Default for DynamicLimits {
    fn default() -> Self {
        Self { v_max: 1.5, yaw_rate_max: 0.9, collector_speed_factor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub weights: CostWeights,
    pub limits: DynamicLimits,
    pub collector_trigger_min_trails: usize,
    pub collector_trigger_radius: f64,
    pub replan_period: f64,
    /// Stuck when displacement over `stuck_window` seconds stays below
    /// `stuck_displacement` meters.
    pub stuck_window: f64,
    pub stuck_displacement: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            limits: DynamicLimits::default(),
            collector_trigger_min_trails: 1,
            collector_trigger_radius: 10.0,
            replan_period: 1.0,
            stuck_window: 3.0,
            stuck_displacement: 0.2,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let l = &self.limits;
        if !(l.v_max > 0.0 && l.yaw_rate_max > 0.0 && l.collector_speed_factor > 0.0) {
            return Err(Error::InvalidConfig("planner.limits must be positive".into()));
        }
        if self.collector_trigger_min_trails < 1 {
            return Err(Error::InvalidConfig("planner.collector_trigger_min_trails must be >= 1".into()));
        }
        if !(self.collector_trigger_radius > 0.0 && self.replan_period > 0.0 && self.stuck_window > 0.0) {
            return Err(Error::InvalidConfig("planner radii and periods must be > 0".into()));
        }
        Ok(())
    }
}

pub fn speed_limit(mode: Mode, limits: &DynamicLimits) -> f64 {
    match mode {
        Mode::Explorer => limits.v_max,
        Mode::Collector => limits.collector_speed_factor * limits.v_max,
    }
}

/// Converts an integer path cost to meters.
pub fn cost_to_length(cost: u64, resolution: f64) -> f64 {
    cost as f64 * 1e-6 * resolution
}

fn step_cost(d: Cell) -> u64 {
    match d[0].abs() + d[1].abs() + d[2].abs() {
        1 => COST_AXIS,
        2 => COST_DIAG2,
        _ => COST_DIAG3,
    }
}

/// Exact obstacle-free distance in cost units (3D octile metric).
fn octile(a: Cell, b: Cell) -> u64 {
    let mut d = [(a[0] - b[0]).unsigned_abs() as u64, (a[1] - b[1]).unsigned_abs() as u64, (a[2] - b[2]).unsigned_abs() as u64];
    d.sort_unstable();
    let [lo, mid, hi] = d;
    lo * COST_DIAG3 + (mid - lo) * COST_DIAG2 + (hi - mid) * COST_AXIS
}

fn neighbor_steps(grid: &VoxelGrid) -> Vec<(Cell, u64)> {
    let flat = grid.dims()[2] == 1;
    crate::grid_map::neighbor_offsets_26()
        .filter(|o| !flat || o[2] == 0)
        .map(|o| (o, step_cost(o)))
        .collect()
}

fn traversable(grid: &VoxelGrid, c: Cell) -> bool {
    grid.get(c) == Some(CellState::Free)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub cost: u64,
    pub length: f64,
}

/// A* over 26-connected Free cells. The start cell is expanded even if it is
/// not Free. Ties in the open set go to the lexicographically smallest cell.
pub fn astar_path(grid: &VoxelGrid, start: Cell, goal: Cell) -> Option<GridPath> {
    let si = grid.index(start)?;
    let gi = grid.index(goal)?;
    if si != gi && !traversable(grid, goal) {
        return None;
    }
    let steps = neighbor_steps(grid);
    let mut g = vec![u64::MAX; grid.len()];
    let mut parent = vec![usize::MAX; grid.len()];
    let mut closed = vec![false; grid.len()];
    let mut open = BinaryHeap::new();
    g[si] = 0;
    open.push(Reverse((octile(start, goal), start)));
    while let Some(Reverse((_, c))) = open.pop() {
        let ci = grid.index_unchecked(c);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if ci == gi {
            let mut cells = vec![c];
            let mut k = ci;
            while parent[k] != usize::MAX {
                k = parent[k];
                cells.push(grid.cell(k));
            }
            cells.reverse();
            let cost = g[gi];
            return Some(GridPath { cells, cost, length: cost_to_length(cost, grid.resolution()) });
        }
        for &(o, w) in &steps {
            let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if !traversable(grid, n) {
                continue;
            }
            let ni = grid.index_unchecked(n);
            let ng = g[ci] + w;
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = ci;
                open.push(Reverse((ng + octile(n, goal), n)));
            }
        }
    }
    None
}

/// Single-source shortest path costs over Free cells (Dijkstra).
#[derive(Clone, Debug)]
pub struct DistanceField {
    dist: Vec<u64>,
    parent: Vec<u32>,
    resolution: f64,
    dims: [usize; 3],
}

impl DistanceField {
    pub fn compute(grid: &VoxelGrid, start: Cell) -> Self {
        let n = grid.len();
        let mut field = Self { dist: vec![u64::MAX; n], parent: vec![u32::MAX; n], resolution: grid.resolution(), dims: grid.dims() };
        let Some(si) = grid.index(start) else { return field };
        let steps = neighbor_steps(grid);
        let mut heap = BinaryHeap::new();
        field.dist[si] = 0;
        heap.push(Reverse((0u64, si)));
        while let Some(Reverse((d, i))) = heap.pop() {
            if d > field.dist[i] {
                continue;
            }
            let c = grid.cell(i);
            for &(o, w) in &steps {
                let nc = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if !traversable(grid, nc) {
                    continue;
                }
                let j = grid.index_unchecked(nc);
                let nd = d + w;
                if nd < field.dist[j] {
                    field.dist[j] = nd;
                    field.parent[j] = i as u32;
                    heap.push(Reverse((nd, j)));
                }
            }
        }
        field
    }

    fn index(&self, c: Cell) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        if c.iter().zip([nx, ny, nz]).all(|(&v, n)| v >= 0 && (v as usize) < n) {
            Some(c[0] as usize + nx * (c[1] as usize + ny * c[2] as usize))
        } else {
            None
        }
    }

    pub fn cost(&self, c: Cell) -> Option<u64> {
        self.index(c).map(|i| self.dist[i]).filter(|d| *d != u64::MAX)
    }

    pub fn length(&self, c: Cell) -> Option<f64> {
        self.cost(c).map(|d| cost_to_length(d, self.resolution))
    }

    pub fn path_to(&self, c: Cell) -> Option<Vec<Cell>> {
        let mut i = self.index(c)?;
        if self.dist[i] == u64::MAX {
            return None;
        }
        let [nx, ny, _] = self.dims;
        let cell = |i: usize| [(i % nx) as i32, ((i / nx) % ny) as i32, (i / (nx * ny)) as i32];
        let mut out = vec![cell(i)];
        while self.parent[i] != u32::MAX {
            i = self.parent[i] as usize;
            out.push(cell(i));
        }
        out.reverse();
        Some(out)
    }
}

/// True when every cell the straight segment between the centers of `a` and
/// `b` passes through is Free (the cell of `a` is exempt).
pub fn segment_free(grid: &VoxelGrid, a: Cell, b: Cell) -> bool {
    let (pa, pb) = (grid.cell_to_world(a), grid.cell_to_world(b));
    let mut ok = true;
    grid.walk_segment(&pa, &pb, |c| {
        if c != a && !traversable(grid, c) {
            ok = false;
            return false;
        }
        true
    });
    ok && (a == b || traversable(grid, b))
}

/// Greedy line-of-sight shortcutting: from each anchor, jump to the farthest
/// following cell that is visible along Free cells.
pub fn string_pull(grid: &VoxelGrid, path: &[Cell]) -> Vec<Cell> {
    if path.len() <= 2 {
        return path.to_vec();
    }
    let mut out = vec![path[0]];
    let mut anchor = 0;
    let mut j = 1;
    while j < path.len() {
        if j + 1 < path.len() && segment_free(grid, path[anchor], path[j + 1]) {
            j += 1;
            continue;
        }
        out.push(path[j]);
        anchor = j;
        j += 1;
    }
    out
}

/// A single-layer, inflated view of the map at flight height.
#[derive(Clone, Debug)]
pub struct PlanningSlice {
    grid: VoxelGrid,
    z: f64,
}

impl PlanningSlice {
    /// Collapses the map layers around height `z` (one layer either side) and
    /// inflates obstacles (Occupied, Unknown, grid edge) by `margin`.
    pub fn build(map: &VoxelGrid, z: f64, margin: f64) -> Self {
        let nz = map.dims()[2];
        let layer = map.cell_of(&Vec3::new(map.origin().x, map.origin().y, z))[2].clamp(0, nz as i32 - 1) as usize;
        let band = map.horizontal_band(layer.saturating_sub(1), layer + 1);
        Self { grid: band.inflate_blocking(margin), z }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Column containing `p`, ignoring its height.
    pub fn cell_at(&self, p: &Vec3) -> Option<Cell> {
        let o = self.grid.origin();
        let r = self.grid.resolution();
        let c = [((p.x - o.x) / r).floor() as i32, ((p.y - o.y) / r).floor() as i32, 0];
        self.grid.contains(c).then_some(c)
    }

    pub fn is_free(&self, p: &Vec3) -> bool {
        self.cell_at(p).is_some_and(|c| self.grid.get(c) == Some(CellState::Free))
    }

    pub fn waypoint(&self, c: Cell) -> Vec3 {
        let w = self.grid.cell_to_world(c);
        Vec3::new(w.x, w.y, self.z)
    }
}

/// A reachable viewpoint of one cluster, with everything the cost functions need.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cluster_id: u32,
    pub viewpoint: Viewpoint,
    pub label: ClusterLabel,
    pub path_length: f64,
    /// Unweighted team term; 0 for a lone agent.
    pub team_cost: f64,
    /// Cluster created by the most recent map update.
    pub recent: bool,
}

/// Angle between the heading and the direction to `target`, in [0, pi].
pub fn view_angle(robot: &AgentState, target: &Vec3) -> f64 {
    let d = target - robot.position;
    let n = d.norm();
    if n < 1e-9 {
        return 0.0;
    }
    robot.heading().dot(&(d / n)).clamp(-1.0, 1.0).acos()
}

fn label_cost(label: ClusterLabel, w: &CostWeights) -> f64 {
    match label {
        ClusterLabel::Frontier => 0.0,
        ClusterLabel::Trail => w.p_trail,
    }
}

pub fn explorer_cost(c: &Candidate, robot: &AgentState, w: &CostWeights) -> f64 {
    w.w_d * c.path_length + w.w_v * view_angle(robot, &c.viewpoint.position) + w.w_l * label_cost(c.label, w) + w.w_f * c.team_cost
}

/// Explorer cost with the view-angle term dropped (used for the fallback).
pub fn fallback_cost(c: &Candidate, w: &CostWeights) -> f64 {
    w.w_d * c.path_length + w.w_l * label_cost(c.label, w) + w.w_f * c.team_cost
}

pub fn collector_cost(c: &Candidate, robot: &AgentState, w: &CostWeights, limits: &DynamicLimits) -> f64 {
    w.w_p * (c.path_length / limits.v_max)
        + w.w_a * (angle_diff(robot.yaw, c.viewpoint.yaw) / limits.yaw_rate_max)
        + w.w_f * c.team_cost
}

fn argmin<'a>(it: impl Iterator<Item = (&'a Candidate, f64)>) -> Option<&'a Candidate> {
    let mut best: Option<(&Candidate, f64)> = None;
    for (c, cost) in it {
        let better = match best {
            None => true,
            Some((b, bc)) => cost < bc || (cost == bc && c.cluster_id < b.cluster_id),
        };
        if better {
            best = Some((c, cost));
        }
    }
    best.map(|(c, _)| c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Recent cluster roughly ahead of the vehicle.
    Forward,
    /// Nearest-by-cost cluster within `d_max`, heading ignored.
    Fallback,
    /// Nearest-by-cost cluster anywhere.
    Global,
}

/// Explorer target choice: forward recent candidates first, then the
/// `d_max`-bounded fallback, then all candidates.
pub fn select_target_explorer<'a>(
    candidates: &'a [Candidate],
    robot: &AgentState,
    w: &CostWeights,
    stuck: bool,
) -> Option<(&'a Candidate, Selection)> {
    use std::f64::consts::FRAC_PI_2;
    if !stuck {
        let forward = candidates
            .iter()
            .filter(|c| c.recent && view_angle(robot, &c.viewpoint.position) <= FRAC_PI_2)
            .map(|c| (c, explorer_cost(c, robot, w)));
        if let Some(c) = argmin(forward) {
            return Some((c, Selection::Forward));
        }
    }
    let near = candidates
        .iter()
        .filter(|c| (c.viewpoint.position - robot.position).norm() <= w.d_max)
        .map(|c| (c, fallback_cost(c, w)));
    if let Some(c) = argmin(near) {
        return Some((c, Selection::Fallback));
    }
    argmin(candidates.iter().map(|c| (c, fallback_cost(c, w)))).map(|c| (c, Selection::Global))
}

/// Collector target: cheapest trail by travel time plus turning time.
pub fn select_target_collector<'a>(
    candidates: &'a [Candidate],
    robot: &AgentState,
    w: &CostWeights,
    limits: &DynamicLimits,
) -> Option<&'a Candidate> {
    argmin(
        candidates
            .iter()
            .filter(|c| c.label == ClusterLabel::Trail)
            .map(|c| (c, collector_cost(c, robot, w, limits))),
    )
}

/// Collector iff enough live trail centroids lie within the trigger radius.
pub fn select_mode(robot_position: &Vec3, trail_centroids: &[Vec3], cfg: &PlannerConfig) -> Mode {
    let near = trail_centroids
        .iter()
        .filter(|c| (*c - robot_position).norm() <= cfg.collector_trigger_radius)
        .count();
    if near >= cfg.collector_trigger_min_trails {
        Mode::Collector
    } else {
        Mode::Explorer
    }
}

/// Sliding-window displacement check for the stuck fallback.
#[derive(Clone, Debug)]
pub struct StuckMonitor {
    window: f64,
    min_displacement: f64,
    history: VecDeque<(f64, Vec3)>,
}

impl StuckMonitor {
    pub fn new(window: f64, min_displacement: f64) -> Self {
        Self { window, min_displacement, history: VecDeque::new() }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn record(&mut self, t: f64, p: Vec3) {
        self.history.push_back((t, p));
        while self.history.len() > 2 && self.history[1].0 <= t - self.window + 1e-9 {
            self.history.pop_front();
        }
    }

    /// True once a full window has been observed with too little motion.
    pub fn is_stuck(&self) -> bool {
        match (self.history.front(), self.history.back()) {
            (Some((t0, p0)), Some((t1, p1))) => t1 - t0 >= self.window - 1e-9 && (p1 - p0).norm() < self.min_displacement,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use std::f64::consts::PI;

    fn free_grid(dims: [usize; 3]) -> VoxelGrid {
        let mut g = VoxelGrid::new(Vec3::zeros(), 0.1, dims).unwrap();
        g.fill(CellState::Free);
        g
    }

    #[test]
    fn straight_corridor_is_three_meters() {
        let g = free_grid([31, 1, 1]);
        let p = astar_path(&g, [0, 0, 0], [30, 0, 0]).unwrap();
        assert!((p.length - 3.0).abs() < 1e-9);
        assert_eq!(p.cells.len(), 31);
    }

    #[test]
    fn sealed_goal_is_unreachable() {
        let mut g = free_grid([10, 10, 1]);
        for y in 0..10 {
            g.set([5, y, 0], CellState::Occupied);
        }
        assert!(astar_path(&g, [0, 0, 0], [9, 9, 0]).is_none());
        let f = DistanceField::compute(&g, [0, 0, 0]);
        assert!(f.cost([9, 9, 0]).is_none());
    }

    /// Label-correcting relaxation to a fixed point; independent of any heap order.
    fn relax_oracle(g: &VoxelGrid, start: Cell) -> Vec<u64> {
        let mut d = vec![u64::MAX; g.len()];
        d[g.index(start).unwrap()] = 0;
        loop {
            let mut changed = false;
            for i in 0..g.len() {
                if d[i] == u64::MAX {
                    continue;
                }
                let c = g.cell(i);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                            if (dx, dy, dz) == (0, 0, 0) || g.get(n) != Some(CellState::Free) {
                                continue;
                            }
                            let w = match dx.abs() + dy.abs() + dz.abs() {
                                1 => 1_000_000,
                                2 => 1_414_214,
                                _ => 1_732_051,
                            };
                            let j = g.index(n).unwrap();
                            if d[i] + w < d[j] {
                                d[j] = d[i] + w;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                return d;
            }
        }
    }

    fn random_map(rng: &mut SeededRng, dims: [usize; 3], p_obs: f64) -> VoxelGrid {
        let mut g = free_grid(dims);
        for i in 0..g.len() {
            if rng.unit() < p_obs {
                let c = g.cell(i);
                g.set(c, CellState::Occupied);
            }
        }
        g
    }

    #[test]
    fn astar_matches_dijkstra_oracle() {
        let mut rng = SeededRng::new(1234);
        for _ in 0..50 {
            let mut g = random_map(&mut rng, [64, 64, 1], 0.2);
            let start = [rng.below(64) as i32, rng.below(64) as i32, 0];
            g.set(start, CellState::Free);
            let oracle = relax_oracle(&g, start);
            let field = DistanceField::compute(&g, start);
            for _ in 0..5 {
                let goal = [rng.below(64) as i32, rng.below(64) as i32, 0];
                let want = oracle[g.index(goal).unwrap()];
                let got = astar_path(&g, start, goal);
                if want == u64::MAX {
                    assert!(got.is_none());
                    assert!(field.cost(goal).is_none());
                } else {
                    let p = got.unwrap();
                    assert_eq!(p.cost, want);
                    assert_eq!(field.cost(goal), Some(want));
                    // the reported cells form a valid path of that cost
                    let sum: u64 = p.cells.windows(2).map(|w| step_cost([w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]])).sum();
                    assert_eq!(sum, want);
                    let fp = field.path_to(goal).unwrap();
                    assert_eq!(fp.first(), Some(&start));
                    assert_eq!(fp.last(), Some(&goal));
                }
            }
        }
    }

    #[test]
    fn astar_in_3d_matches_oracle() {
        let mut rng = SeededRng::new(99);
        for _ in 0..10 {
            let mut g = random_map(&mut rng, [12, 12, 6], 0.25);
            g.set([0, 0, 0], CellState::Free);
            let oracle = relax_oracle(&g, [0, 0, 0]);
            for i in 0..g.len() {
                let got = astar_path(&g, [0, 0, 0], g.cell(i)).map(|p| p.cost);
                let want = (oracle[i] != u64::MAX).then_some(oracle[i]);
                if g.state(i) == CellState::Free {
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn string_pull_keeps_clear_segments() {
        let mut g = free_grid([40, 40, 1]);
        for y in 0..30 {
            g.set([20, y, 0], CellState::Occupied);
        }
        let p = astar_path(&g, [2, 2, 0], [38, 2, 0]).unwrap();
        let pulled = string_pull(&g, &p.cells);
        assert!(pulled.len() < p.cells.len());
        assert_eq!(pulled.first(), p.cells.first());
        assert_eq!(pulled.last(), p.cells.last());
        for w in pulled.windows(2) {
            let unit_step = (0..3).all(|k| (w[0][k] - w[1][k]).abs() <= 1);
            assert!(unit_step || segment_free(&g, w[0], w[1]));
        }
    }

    fn robot(yaw: f64) -> AgentState {
        AgentState::new(0, Vec3::new(5.0, 5.0, 1.0), yaw)
    }

    fn cand(id: u32, pos: Vec3, yaw: f64, label: ClusterLabel, len: f64) -> Candidate {
        Candidate {
            cluster_id: id,
            viewpoint: Viewpoint { position: pos, yaw, coverage: 1 },
            label,
            path_length: len,
            team_cost: 0.0,
            recent: true,
        }
    }

    #[test]
    fn explorer_cost_cases() {
        let w = CostWeights::default();
        let r = robot(0.0);
        let ahead = cand(0, Vec3::new(8.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 3.0);
        assert!((explorer_cost(&ahead, &r, &w) - 3.0).abs() < 1e-12);
        let behind = cand(1, Vec3::new(2.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 3.0);
        assert!((view_angle(&r, &behind.viewpoint.position) - PI).abs() < 1e-12);
        let trail = cand(2, Vec3::new(8.0, 5.0, 1.0), 0.0, ClusterLabel::Trail, 3.0);
        assert!((explorer_cost(&trail, &r, &w) - explorer_cost(&ahead, &r, &w) - w.w_l * w.p_trail).abs() < 1e-12);
        let here = cand(3, r.position, 0.0, ClusterLabel::Frontier, 0.0);
        assert_eq!(view_angle(&r, &here.viewpoint.position), 0.0);
    }

    #[test]
    fn collector_cost_cases() {
        let w = CostWeights::default();
        let l = DynamicLimits::default();
        let c = cand(0, Vec3::new(8.0, 5.0, 1.0), 0.0, ClusterLabel::Trail, 3.0);
        assert!((collector_cost(&c, &robot(0.0), &w, &l) - 2.0).abs() < 1e-12);
        let c = cand(0, Vec3::new(5.0, 5.0, 1.0), 0.9, ClusterLabel::Trail, 0.0);
        assert!((collector_cost(&c, &robot(0.0), &w, &l) - 1.0).abs() < 1e-12);
        let c = cand(0, Vec3::new(5.0, 5.0, 1.0), 3.0, ClusterLabel::Trail, 0.0);
        let oracle = (-3i32..=3).map(|k| (3.0 - (-3.0) + 2.0 * PI * k as f64).abs()).fold(f64::INFINITY, f64::min);
        assert!((collector_cost(&c, &robot(-3.0), &w, &l) * l.yaw_rate_max - oracle).abs() < 1e-12);
    }

    #[test]
    fn explorer_selection_cases() {
        let w = CostWeights::default();
        let r = robot(0.0);
        let one = [cand(4, Vec3::new(8.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 3.0)];
        assert_eq!(select_target_explorer(&one, &r, &w, false).unwrap().0.cluster_id, 4);
        let two = [
            cand(0, Vec3::new(2.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 3.0),
            cand(1, Vec3::new(8.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 3.0),
        ];
        let (c, how) = select_target_explorer(&two, &r, &w, false).unwrap();
        assert_eq!((c.cluster_id, how), (1, Selection::Forward));
        assert!(select_target_explorer(&[], &r, &w, false).is_none());
    }

    #[test]
    fn dead_end_falls_back_to_nearest_by_path() {
        // every candidate lies behind the vehicle; the fallback must pick the
        // cheapest by path within d_max, regardless of heading
        let w = CostWeights::default();
        let r = robot(0.0);
        let cands = [
            cand(0, Vec3::new(1.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 6.0),
            cand(1, Vec3::new(4.0, 8.0, 1.0), 0.0, ClusterLabel::Frontier, 4.5),
            cand(2, Vec3::new(4.0, 1.0, 1.0), 0.0, ClusterLabel::Trail, 4.2),
            cand(3, Vec3::new(-30.0, 5.0, 1.0), 0.0, ClusterLabel::Frontier, 1.0),
        ];
        let (c, how) = select_target_explorer(&cands, &r, &w, false).unwrap();
        let oracle = cands
            .iter()
            .filter(|c| (c.viewpoint.position - r.position).norm() <= w.d_max)
            .min_by(|a, b| fallback_cost(a, &w).partial_cmp(&fallback_cost(b, &w)).unwrap())
            .unwrap();
        assert_eq!(how, Selection::Fallback);
        assert_eq!(c.cluster_id, oracle.cluster_id);
        assert_eq!(c.cluster_id, 1);
        // out of d_max only: global greedy still answers
        let far = [cands[3].clone()];
        assert_eq!(select_target_explorer(&far, &r, &w, true).unwrap().1, Selection::Global);
    }

    #[test]
    fn collector_break_even_flips_winner() {
        // near trail behind (needs a half turn) vs a farther trail ahead
        let l = DynamicLimits::default();
        let r = robot(0.0);
        let near = cand(0, Vec3::new(4.0, 5.0, 1.0), PI, ClusterLabel::Trail, 1.0);
        let far = cand(1, Vec3::new(7.0, 5.0, 1.0), 0.0, ClusterLabel::Trail, 2.0);
        // w_p * 1/v + w_a * pi/g = w_p * 2/v  =>  w_a / w_p = g / (pi v)
        let ratio = l.yaw_rate_max / (PI * l.v_max);
        for (scale, want) in [(0.5, 0), (2.0, 1)] {
            let w = CostWeights { w_p: 1.0, w_a: ratio * scale, ..CostWeights::default() };
            let pair = [near.clone(), far.clone()];
            let pick = select_target_collector(&pair, &r, &w, &l).unwrap();
            assert_eq!(pick.cluster_id, want, "scale {scale}");
        }
        assert!(select_target_collector(&[], &r, &CostWeights::default(), &l).is_none());
    }

    #[test]
    fn mode_rules() {
        let cfg = PlannerConfig { collector_trigger_min_trails: 2, ..PlannerConfig::default() };
        let p = Vec3::new(0.0, 0.0, 1.0);
        let near = [Vec3::new(1.0, 0.0, 1.0), Vec3::new(0.0, 2.0, 1.0), Vec3::new(3.0, 3.0, 1.0)];
        assert_eq!(select_mode(&p, &near, &cfg), Mode::Collector);
        let far = [Vec3::new(20.0, 0.0, 1.0), Vec3::new(0.0, 30.0, 1.0)];
        assert_eq!(select_mode(&p, &far, &cfg), Mode::Explorer);
        assert_eq!(select_mode(&p, &[], &cfg), Mode::Explorer);
    }

    #[test]
    fn speed_limits() {
        let l = DynamicLimits::default();
        assert_eq!(speed_limit(Mode::Explorer, &l), 1.5);
        assert_eq!(speed_limit(Mode::Collector, &l), 3.0);
        let same = DynamicLimits { collector_speed_factor: 1.0, ..l };
        assert_eq!(speed_limit(Mode::Explorer, &same), speed_limit(Mode::Collector, &same));
    }

    #[test]
    fn stuck_monitor_needs_full_window() {
        let mut m = StuckMonitor::new(3.0, 0.2);
        for k in 0..=20 {
            m.record(k as f64 * 0.1, Vec3::zeros());
        }
        assert!(!m.is_stuck());
        for k in 21..=31 {
            m.record(k as f64 * 0.1, Vec3::zeros());
        }
        assert!(m.is_stuck());
        m.record(3.2, Vec3::new(1.0, 0.0, 0.0));
        assert!(!m.is_stuck());
    }

    #[test]
    fn slice_collapses_band_and_inflates() {
        let mut map = VoxelGrid::new(Vec3::zeros(), 0.1, [20, 20, 20]).unwrap();
        map.fill(CellState::Free);
        map.set([10, 10, 10], CellState::Occupied);
        map.set([3, 3, 0], CellState::Occupied);
        let s = PlanningSlice::build(&map, 1.0, 0.2);
        assert_eq!(s.grid().dims(), [20, 20, 1]);
        assert!(!s.is_free(&Vec3::new(1.05, 1.05, 1.0)));
        assert!(!s.is_free(&Vec3::new(1.25, 1.05, 1.0)));
        assert!(s.is_free(&Vec3::new(1.35, 1.05, 1.0)));
        // far below the band
        assert!(s.is_free(&Vec3::new(0.35, 0.35, 1.0)));
    }
}
