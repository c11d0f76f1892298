//! Frontier cells, clusters, trail labels and viewpoints.
//!
//! A frontier cell is a Free cell with at least one face-adjacent Unknown
//! cell. Frontier cells are grouped into 26-connected components; a component
//! whose principal-axis extent exceeds `max_extent` is split by the plane
//! through its centroid normal to that axis, and each half is split again
//! into components and recursed on.
//!
//! [`FrontierMap`] keeps the clustering up to date incrementally: only
//! components that contain a changed cell are flooded and re-split, which
//! yields the same partition as clustering the whole map from scratch.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid_map::{CellState, VoxelGrid, FACE_OFFSETS};
use crate::sensor::{DepthCamera, Pose};
use crate::{normalize_angle, Vec3};

/// Failed viewpoint attempts after which a cluster's cells are written off.
pub const DEFAULT_DEAD_STRIKES: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterLabel {
    Frontier,
    Trail,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub position: Vec3,
    pub yaw: f64,
    /// Visible cluster cells among the sampled ones.
    pub coverage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontierCluster {
    pub id: u32,
    /// Linear cell indices, ascending.
    pub cells: Vec<usize>,
    pub centroid: Vec3,
    pub label: ClusterLabel,
    pub viewpoint: Option<Viewpoint>,
    pub neighbor_ids: Vec<u32>,
    pub dead: bool,
}

impl FrontierCluster {
    fn new(id: u32, cells: Vec<usize>, grid: &VoxelGrid) -> Self {
        let centroid = centroid_of(&cells, grid);
        Self {
            id,
            cells,
            centroid,
            label: ClusterLabel::Frontier,
            viewpoint: None,
            neighbor_ids: Vec::new(),
            dead: false,
        }
    }
}

fn centroid_of(cells: &[usize], grid: &VoxelGrid) -> Vec3 {
    let mut sum = Vec3::zeros();
    for &i in cells {
        let c = grid.cell(i);
        sum += Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64);
    }
    let mean = sum / cells.len() as f64;
    grid.origin() + (mean + Vec3::repeat(0.5)) * grid.resolution()
}

pub fn is_frontier(grid: &VoxelGrid, idx: usize) -> bool {
    if grid.state(idx) != CellState::Free {
        return false;
    }
    let c = grid.cell(idx);
    FACE_OFFSETS
        .iter()
        .any(|o| grid.get([c[0] + o[0], c[1] + o[1], c[2] + o[2]]) == Some(CellState::Unknown))
}

/// All frontier cells of `grid`, ascending.
pub fn detect_frontier_cells(grid: &VoxelGrid) -> Vec<usize> {
    (0..grid.len()).filter(|&i| is_frontier(grid, i)).collect()
}

fn for_each_neighbor_26(grid: &VoxelGrid, idx: usize, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = grid.dims();
    let c = grid.cell(idx);
    for dz in -1..=1 {
        let z = c[2] + dz;
        if z < 0 || z >= nz as i32 {
            continue;
        }
        for dy in -1..=1 {
            let y = c[1] + dy;
            if y < 0 || y >= ny as i32 {
                continue;
            }
            for dx in -1..=1 {
                let x = c[0] + dx;
                if x < 0 || x >= nx as i32 || (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                f(x as usize + nx * (y as usize + ny * z as usize));
            }
        }
    }
}

/// Generation-stamped scratch marks over the grid, reused across floods.
#[derive(Clone, Debug)]
struct Marks {
    mark: Vec<u32>,
    gen: u32,
}

impl Marks {
    fn new(n: usize) -> Self {
        Self { mark: vec![0; n], gen: 0 }
    }

    /// Returns a fresh pair of stamps `(g, g + 1)`.
    fn next(&mut self) -> u32 {
        if self.gen >= u32::MAX - 4 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.gen = 0;
        }
        self.gen += 2;
        self.gen
    }
}

/// Floods 26-connected components from `seeds`. `member(marks, j)` decides
/// whether an unvisited cell belongs to the set; visited cells are stamped
/// with `visit`. Components come back sorted internally and ordered by their
/// smallest cell.
fn flood(
    grid: &VoxelGrid,
    seeds: &[usize],
    marks: &mut Marks,
    visit: u32,
    member: impl Fn(&[u32], usize) -> bool,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for &s in seeds {
        if marks.mark[s] == visit || !member(&marks.mark, s) {
            continue;
        }
        marks.mark[s] = visit;
        stack.push(s);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            for_each_neighbor_26(grid, i, |j| {
                if marks.mark[j] != visit && member(&marks.mark, j) {
                    marks.mark[j] = visit;
                    stack.push(j);
                }
            });
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort_unstable_by_key(|c| c[0]);
    out
}

fn components(grid: &VoxelGrid, cells: &[usize], marks: &mut Marks) -> Vec<Vec<usize>> {
    let g = marks.next();
    for &c in cells {
        marks.mark[c] = g;
    }
    flood(grid, cells, marks, g + 1, |m, j| m[j] == g)
}

/// Recursive principal-axis bisection of one connected component.
fn bisect(grid: &VoxelGrid, cells: Vec<usize>, max_extent_cells: f64, marks: &mut Marks, out: &mut Vec<Vec<usize>>) {
    if cells.len() < 2 {
        out.push(cells);
        return;
    }
    let coords: Vec<Vector3<f64>> = cells
        .iter()
        .map(|&i| {
            let c = grid.cell(i);
            Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)
        })
        .collect();
    let mean = coords.iter().sum::<Vector3<f64>>() / coords.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &coords {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut k = 0;
    for j in 1..3 {
        if eig.eigenvalues[j] > eig.eigenvalues[k] {
            k = j;
        }
    }
    let axis = eig.eigenvectors.column(k).into_owned();
    let proj: Vec<f64> = coords.iter().map(|p| (p - mean).dot(&axis)).collect();
    let lo_p = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_p = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi_p - lo_p <= max_extent_cells + 1e-9 {
        out.push(cells);
        return;
    }
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for (&c, &p) in cells.iter().zip(&proj) {
        if p < 0.0 {
            lo.push(c);
        } else {
            hi.push(c);
        }
    }
    if lo.is_empty() || hi.is_empty() {
        out.push(cells);
        return;
    }
    drop(coords);
    for half in [lo, hi] {
        for comp in components(grid, &half, marks) {
            bisect(grid, comp, max_extent_cells, marks, out);
        }
    }
}

fn split_components(grid: &VoxelGrid, comps: Vec<Vec<usize>>, max_extent: f64, marks: &mut Marks) -> Vec<Vec<usize>> {
    let max_cells = max_extent / grid.resolution();
    let mut out = Vec::new();
    for comp in comps {
        bisect(grid, comp, max_cells, marks, &mut out);
    }
    out
}

/// Clusters frontier `cells` into 26-connected, extent-limited groups. Ids are
/// assigned in output order starting at 0.
pub fn cluster_frontiers(cells: &[usize], grid: &VoxelGrid, max_extent: f64) -> Vec<FrontierCluster> {
    let mut marks = Marks::new(grid.len());
    let comps = components(grid, cells, &mut marks);
    split_components(grid, comps, max_extent, &mut marks)
        .into_iter()
        .enumerate()
        .map(|(id, cells)| FrontierCluster::new(id as u32, cells, grid))
        .collect()
}

type P2 = [i64; 2];

fn cross(o: P2, a: P2, b: P2) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull without collinear vertices (monotone chain).
/// Collinear input yields its two extreme points.
pub fn convex_hull_2d(mut pts: Vec<P2>) -> Vec<P2> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<P2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &P2>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Closed point-in-hull test for a hull from [`convex_hull_2d`].
pub fn in_hull(hull: &[P2], p: P2) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p[0] >= a[0].min(b[0])
                && p[0] <= a[0].max(b[0])
                && p[1] >= a[1].min(b[1])
                && p[1] <= a[1].max(b[1])
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Rule (a) of the trail test: every in-grid cell of the 8-connected ring just
/// outside the 2D hull of the cluster's footprint, over the cluster's z-range,
/// is Free.
pub fn hull_ring_is_free(cells: &[usize], grid: &VoxelGrid) -> bool {
    let mut pts = Vec::with_capacity(cells.len());
    let (mut z_lo, mut z_hi) = (i32::MAX, i32::MIN);
    for &i in cells {
        let c = grid.cell(i);
        pts.push([c[0] as i64, c[1] as i64]);
        z_lo = z_lo.min(c[2]);
        z_hi = z_hi.max(c[2]);
    }
    let hull = convex_hull_2d(pts);
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for p in &hull {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let w = (x1 - x0 + 3) as usize;
    let h = (y1 - y0 + 3) as usize;
    // inside-hull raster over the bbox padded by one cell
    let mut inside = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            inside[u + w * v] = in_hull(&hull, [x0 - 1 + u as i64, y0 - 1 + v as i64]);
        }
    }
    for v in 0..h {
        for u in 0..w {
            if inside[u + w * v] {
                continue;
            }
            let touches = (-1i64..=1).any(|dv| {
                (-1i64..=1).any(|du| {
                    let (uu, vv) = (u as i64 + du, v as i64 + dv);
                    uu >= 0 && vv >= 0 && (uu as usize) < w && (vv as usize) < h && inside[uu as usize + w * vv as usize]
                })
            });
            if !touches {
                continue;
            }
            let (x, y) = ((x0 - 1 + u as i64) as i32, (y0 - 1 + v as i64) as i32);
            for z in z_lo..=z_hi {
                if let Some(s) = grid.get([x, y, z]) {
                    if s != CellState::Free {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn neighbor_reach(grid: &VoxelGrid, neighbor_dist: f64) -> (i32, i64) {
    let r = neighbor_dist / grid.resolution();
    ((r + 1e-6).floor() as i32, (r * r + 1e-6).floor() as i64)
}

fn cells_within(grid: &VoxelGrid, a: &[usize], b: &[usize], reach: i32, r2: i64) -> bool {
    let bc: Vec<_> = b.iter().map(|&j| grid.cell(j)).collect();
    let (mut lo, mut hi) = ([i32::MAX; 3], [i32::MIN; 3]);
    for c in &bc {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    a.iter().map(|&i| grid.cell(i)).any(|ca| {
        (0..3).all(|k| ca[k] >= lo[k] - reach && ca[k] <= hi[k] + reach)
            && bc.iter().any(|cb| {
                let d: i64 = (0..3).map(|k| ((ca[k] - cb[k]) as i64).pow(2)).sum();
                d <= r2
            })
    })
}

/// Ids of the clusters in `all` (other than `cluster`) with some cell center
/// within `neighbor_dist` of a cell center of `cluster`.
pub fn cluster_neighbors(cluster: &FrontierCluster, all: &[FrontierCluster], grid: &VoxelGrid, neighbor_dist: f64) -> Vec<u32> {
    let (reach, r2) = neighbor_reach(grid, neighbor_dist);
    all.iter()
        .filter(|o| o.id != cluster.id && cells_within(grid, &cluster.cells, &o.cells, reach, r2))
        .map(|o| o.id)
        .collect()
}

/// Trail if the hull ring is entirely Free or the cluster has at most one
/// neighbor; Frontier otherwise.
pub fn classify_cluster(cluster: &FrontierCluster, grid: &VoxelGrid, all: &[FrontierCluster], neighbor_dist: f64) -> ClusterLabel {
    if hull_ring_is_free(&cluster.cells, grid) || cluster_neighbors(cluster, all, grid, neighbor_dist).len() <= 1 {
        ClusterLabel::Trail
    } else {
        ClusterLabel::Frontier
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewpointParams {
    pub r_min: f64,
    pub r_max: f64,
    pub n_angles: usize,
    pub n_radii: usize,
    /// Upper bound on cluster cells tested for visibility per candidate;
    /// larger clusters are subsampled with an even stride.
    pub max_samples: usize,
}

impl Default for ViewpointParams {
    fn default() -> Self {
        Self { r_min: 1.0, r_max: 3.5, n_angles: 16, n_radii: 3, max_samples: 64 }
    }
}

/// True when no Occupied cell lies strictly between `from` and the cell
/// containing `to` along the grid walk.
pub fn line_of_sight(grid: &VoxelGrid, from: &Vec3, to: &Vec3) -> bool {
    let target = grid.cell_of(to);
    let mut clear = true;
    grid.walk_segment(from, to, |c| {
        if c == target {
            return false;
        }
        if grid.get(c) == Some(CellState::Occupied) {
            clear = false;
            return false;
        }
        true
    });
    clear
}

fn sample_cells(cells: &[usize], max_samples: usize) -> Vec<usize> {
    if cells.len() <= max_samples.max(1) {
        return cells.to_vec();
    }
    (0..max_samples).map(|k| cells[k * cells.len() / max_samples]).collect()
}

/// Counts the cells of `targets` visible from `pose`.
pub fn coverage_from(grid: &VoxelGrid, cam: &DepthCamera, pose: &Pose, targets: &[Vec3]) -> usize {
    targets
        .iter()
        .filter(|t| cam.sees(pose, t) && line_of_sight(grid, &pose.position, t))
        .count()
}

/// Best viewing pose for a cluster. Candidates sit on rings around the
/// centroid at height `z` (the centroid height when `None`), face the
/// centroid, and must pass `is_valid`. The candidate seeing the most cluster
/// cells wins; ties go to the smaller radius, then the lower angle index.
/// Candidates that see nothing are discarded.
pub fn sample_viewpoint(
    cluster: &FrontierCluster,
    grid: &VoxelGrid,
    cam: &DepthCamera,
    params: &ViewpointParams,
    z: Option<f64>,
    is_valid: impl Fn(&Vec3) -> bool,
) -> Option<Viewpoint> {
    let targets: Vec<Vec3> = sample_cells(&cluster.cells, params.max_samples)
        .into_iter()
        .map(|i| grid.cell_to_world(grid.cell(i)))
        .collect();
    let c = cluster.centroid;
    let z = z.unwrap_or(c.z);
    let mut best: Option<Viewpoint> = None;
    for k in 0..params.n_radii {
        let r = if params.n_radii > 1 {
            params.r_min + (params.r_max - params.r_min) * k as f64 / (params.n_radii - 1) as f64
        } else {
            params.r_min
        };
        for a in 0..params.n_angles {
            let theta = std::f64::consts::TAU * a as f64 / params.n_angles as f64;
            let position = Vec3::new(c.x + r * theta.cos(), c.y + r * theta.sin(), z);
            if !is_valid(&position) {
                continue;
            }
            let pose = Pose::new(position, normalize_angle(theta + std::f64::consts::PI));
            let coverage = coverage_from(grid, cam, &pose, &targets);
            if coverage > 0 && best.map_or(true, |b| coverage > b.coverage) {
                best = Some(Viewpoint { position, yaw: pose.yaw, coverage });
            }
        }
    }
    best
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Entry {
    cluster: FrontierCluster,
    labelled: bool,
    viewpoint_done: bool,
}

/// Incrementally maintained frontier clustering of one agent's map.
#[derive(Clone, Debug)]
pub struct FrontierMap {
    max_extent: f64,
    dead_strikes: u8,
    frontier: Vec<bool>,
    cluster_of: Vec<u32>,
    strikes: Vec<u8>,
    entries: BTreeMap<u32, Entry>,
    next_id: u32,
    dirty: Vec<usize>,
    touched: Vec<u32>,
    marks: Marks,
    neighbor_offsets: Vec<[i32; 3]>,
    neighbor_dist: f64,
}

impl FrontierMap {
    pub fn new(grid: &VoxelGrid, max_extent: f64, neighbor_dist: f64) -> Self {
        let n = grid.len();
        let mut map = Self {
            max_extent,
            dead_strikes: DEFAULT_DEAD_STRIKES,
            frontier: vec![false; n],
            cluster_of: vec![NONE; n],
            strikes: vec![0; n],
            entries: BTreeMap::new(),
            next_id: 0,
            dirty: Vec::new(),
            touched: Vec::new(),
            marks: Marks::new(n),
            neighbor_offsets: Vec::new(),
            neighbor_dist,
        };
        let (reach, r2) = neighbor_reach(grid, neighbor_dist);
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d = (dx * dx + dy * dy + dz * dz) as i64;
                    if d <= r2 && d > 0 {
                        map.neighbor_offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        for i in 0..n {
            if is_frontier(grid, i) {
                map.frontier[i] = true;
                map.dirty.push(i);
            }
        }
        map.recluster(grid);
        map
    }

    pub fn with_dead_strikes(mut self, k: u8) -> Self {
        self.dead_strikes = k.max(1);
        self
    }

    pub fn max_extent(&self) -> f64 {
        self.max_extent
    }

    pub fn neighbor_dist(&self) -> f64 {
        self.neighbor_dist
    }

    pub fn is_frontier(&self, idx: usize) -> bool {
        self.frontier[idx]
    }

    pub fn cluster_of(&self, idx: usize) -> Option<u32> {
        let id = self.cluster_of[idx];
        (id != NONE).then_some(id)
    }

    /// Updates frontier flags around cells whose state changed. Clusters are
    /// left alone until [`FrontierMap::recluster`].
    pub fn update(&mut self, grid: &VoxelGrid, changed: &[usize]) {
        for &i in changed {
            self.refresh(grid, i);
            let c = grid.cell(i);
            for o in FACE_OFFSETS {
                if let Some(j) = grid.index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]) {
                    self.refresh(grid, j);
                }
            }
        }
    }

    fn refresh(&mut self, grid: &VoxelGrid, i: usize) {
        let f = is_frontier(grid, i);
        if f != self.frontier[i] {
            self.frontier[i] = f;
            self.dirty.push(i);
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.dirty.is_empty()
    }

    /// Re-clusters every component touched since the last call. Returns the
    /// ids of the clusters created, which also become [`FrontierMap::touched`].
    pub fn recluster(&mut self, grid: &VoxelGrid) -> &[u32] {
        self.touched.clear();
        for e in self.entries.values_mut() {
            e.labelled = false;
        }
        if self.dirty.is_empty() {
            return &self.touched;
        }
        let mut dirty = std::mem::take(&mut self.dirty);
        dirty.sort_unstable();
        dirty.dedup();
        let mut stale = BTreeSet::new();
        let mut seeds = Vec::new();
        for &d in &dirty {
            if self.frontier[d] {
                seeds.push(d);
            } else if self.cluster_of[d] != NONE {
                stale.insert(self.cluster_of[d]);
                self.cluster_of[d] = NONE;
                let frontier = &self.frontier;
                for_each_neighbor_26(grid, d, |j| {
                    if frontier[j] {
                        seeds.push(j);
                    }
                });
            }
        }
        let g = self.marks.next();
        let frontier = &self.frontier;
        let comps = flood(grid, &seeds, &mut self.marks, g, |_, j| frontier[j]);
        for comp in &comps {
            for &c in comp {
                if self.cluster_of[c] != NONE {
                    stale.insert(self.cluster_of[c]);
                }
            }
        }
        for id in stale {
            if let Some(e) = self.entries.remove(&id) {
                for c in e.cluster.cells {
                    if self.cluster_of[c] == id {
                        self.cluster_of[c] = NONE;
                    }
                }
            }
        }
        for cells in split_components(grid, comps, self.max_extent, &mut self.marks) {
            let id = self.next_id;
            self.next_id += 1;
            for &c in &cells {
                self.cluster_of[c] = id;
            }
            let mut cluster = FrontierCluster::new(id, cells, grid);
            cluster.dead = self.all_dead(&cluster.cells);
            self.entries.insert(id, Entry { cluster, labelled: false, viewpoint_done: false });
            self.touched.push(id);
        }
        &self.touched
    }

    fn all_dead(&self, cells: &[usize]) -> bool {
        cells.iter().all(|&c| self.strikes[c] >= self.dead_strikes)
    }

    /// Ids created by the most recent [`FrontierMap::recluster`].
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn cluster(&self, id: u32) -> Option<&FrontierCluster> {
        self.entries.get(&id).map(|e| &e.cluster)
    }

    pub fn clusters(&self) -> impl Iterator<Item = &FrontierCluster> {
        self.entries.values().map(|e| &e.cluster)
    }

    pub fn live_ids(&self) -> Vec<u32> {
        self.entries.values().filter(|e| !e.cluster.dead).map(|e| e.cluster.id).collect()
    }

    pub fn live_count(&self) -> usize {
        self.entries.values().filter(|e| !e.cluster.dead).count()
    }

    pub fn dead_count(&self) -> usize {
        self.entries.values().filter(|e| e.cluster.dead).count()
    }

    /// Clusters as sorted cell lists, ordered by first cell.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p: Vec<Vec<usize>> = self.entries.values().map(|e| e.cluster.cells.clone()).collect();
        p.sort_unstable_by_key(|c| c[0]);
        p
    }

    /// Counts distinct neighbor clusters, stopping once `cap` are found.
    fn neighbors_capped(&self, grid: &VoxelGrid, id: u32, cap: usize) -> Vec<u32> {
        let mut found: Vec<u32> = Vec::new();
        let cells = &self.entries[&id].cluster.cells;
        for &i in cells {
            let c = grid.cell(i);
            for o in &self.neighbor_offsets {
                if let Some(j) = grid.index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]) {
                    let k = self.cluster_of[j];
                    if k != NONE && k != id && !found.contains(&k) {
                        found.push(k);
                        if found.len() >= cap {
                            found.sort_unstable();
                            return found;
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        found
    }

    /// Trail label for `id`, computed on demand and cached until the next
    /// recluster.
    pub fn label(&mut self, grid: &VoxelGrid, id: u32) -> ClusterLabel {
        let e = &self.entries[&id];
        if e.labelled {
            return e.cluster.label;
        }
        let (label, neighbors) = if hull_ring_is_free(&e.cluster.cells, grid) {
            (ClusterLabel::Trail, Vec::new())
        } else {
            let n = self.neighbors_capped(grid, id, 2);
            (if n.len() <= 1 { ClusterLabel::Trail } else { ClusterLabel::Frontier }, n)
        };
        let e = self.entries.get_mut(&id).expect("cluster exists");
        e.cluster.label = label;
        e.cluster.neighbor_ids = neighbors;
        e.labelled = true;
        label
    }

    /// Cached viewpoint of `id`; recomputed when missing or when the cached
    /// pose no longer passes `is_valid`.
    pub fn viewpoint(
        &mut self,
        grid: &VoxelGrid,
        id: u32,
        cam: &DepthCamera,
        params: &ViewpointParams,
        z: Option<f64>,
        is_valid: impl Fn(&Vec3) -> bool,
    ) -> Option<Viewpoint> {
        let e = self.entries.get_mut(&id)?;
        if e.viewpoint_done {
            match e.cluster.viewpoint {
                Some(vp) if is_valid(&vp.position) => return Some(vp),
                None => return None,
                _ => {}
            }
        }
        let vp = sample_viewpoint(&e.cluster, grid, cam, params, z, is_valid);
        e.cluster.viewpoint = vp;
        e.viewpoint_done = true;
        vp
    }

    /// Forgets cached viewpoints so they are resampled on next use.
    pub fn invalidate_viewpoints(&mut self) {
        for e in self.entries.values_mut() {
            e.viewpoint_done = false;
        }
    }

    /// Records a failed attempt on every cell of `id`. Returns true if the
    /// cluster is dead afterwards.
    pub fn strike(&mut self, id: u32) -> bool {
        let Some(e) = self.entries.get(&id) else { return false };
        for &c in &e.cluster.cells {
            self.strikes[c] = self.strikes[c].saturating_add(1);
        }
        let dead = self.all_dead(&e.cluster.cells);
        self.entries.get_mut(&id).expect("cluster exists").cluster.dead = dead;
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_map::Cell;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::new(Vec3::zeros(), 0.1, dims).unwrap()
    }

    fn brute_frontier(g: &VoxelGrid) -> Vec<usize> {
        let [nx, ny, nz] = g.dims();
        let mut out = Vec::new();
        for z in 0..nz as i32 {
            for y in 0..ny as i32 {
                for x in 0..nx as i32 {
                    if g.get([x, y, z]) != Some(CellState::Free) {
                        continue;
                    }
                    let n = [[x - 1, y, z], [x + 1, y, z], [x, y - 1, z], [x, y + 1, z], [x, y, z - 1], [x, y, z + 1]];
                    if n.iter().any(|c| g.get(*c) == Some(CellState::Unknown)) {
                        out.push(g.index([x, y, z]).unwrap());
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn random_grid(rng: &mut SeededRng, dims: [usize; 3], p_free: f64, p_occ: f64) -> VoxelGrid {
        let mut g = grid(dims);
        for i in 0..g.len() {
            let u = rng.unit();
            let s = if u < p_free {
                CellState::Free
            } else if u < p_free + p_occ {
                CellState::Occupied
            } else {
                CellState::Unknown
            };
            g.raise(i, s);
        }
        g
    }

    #[test]
    fn trivial_grids_have_no_frontier() {
        let mut g = grid([5, 5, 5]);
        assert!(detect_frontier_cells(&g).is_empty());
        g.fill(CellState::Free);
        assert!(detect_frontier_cells(&g).is_empty());
    }

    #[test]
    fn half_space_split_gives_one_layer() {
        let mut g = grid([8, 6, 4]);
        for i in 0..g.len() {
            if g.cell(i)[0] < 3 {
                g.raise(i, CellState::Free);
            }
        }
        let f = detect_frontier_cells(&g);
        assert_eq!(f, brute_frontier(&g));
        assert_eq!(f.len(), 6 * 4);
        assert!(f.iter().all(|&i| g.cell(i)[0] == 2));
    }

    #[test]
    fn detection_matches_brute_force_on_random_grids() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let g = random_grid(&mut rng, [9, 7, 5], 0.5, 0.2);
            assert_eq!(detect_frontier_cells(&g), brute_frontier(&g));
        }
    }

    fn line_cells(g: &VoxelGrid, n: i32) -> Vec<usize> {
        (0..n).map(|x| g.index([x, 0, 0]).unwrap()).collect()
    }

    #[test]
    fn separated_cells_form_two_clusters() {
        let g = grid([20, 1, 1]);
        let cells = vec![g.index([2, 0, 0]).unwrap(), g.index([12, 0, 0]).unwrap()];
        let cl = cluster_frontiers(&cells, &g, 4.5);
        assert_eq!(cl.len(), 2);
        assert!(cluster_frontiers(&[], &g, 4.5).is_empty());
    }

    /// Reference bisection of a straight run of cells: halve until each piece
    /// spans at most `max` cell steps.
    fn line_oracle(lo: i32, hi: i32, max: i32, out: &mut Vec<(i32, i32)>) {
        if hi - lo <= max {
            out.push((lo, hi));
            return;
        }
        let mid2 = lo + hi; // twice the centroid
        let split = (mid2 + 1).div_euclid(2); // first cell with 2x >= lo + hi
        line_oracle(lo, split - 1, max, out);
        line_oracle(split, hi, max, out);
    }

    #[test]
    fn straight_line_bisects_into_four() {
        let g = grid([100, 1, 1]);
        let cl = cluster_frontiers(&line_cells(&g, 100), &g, 3.0);
        let mut want = Vec::new();
        line_oracle(0, 99, 30, &mut want);
        assert_eq!(want.len(), 4);
        let mut got: Vec<(i32, i32)> = cl
            .iter()
            .map(|c| (g.cell(c.cells[0])[0], g.cell(*c.cells.last().unwrap())[0]))
            .collect();
        got.sort_unstable();
        assert_eq!(got, want);
        assert!(cl.iter().all(|c| c.cells.len() <= 30));
    }

    #[test]
    fn clustering_is_a_partition_of_components() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let g = random_grid(&mut rng, [16, 16, 3], 0.55, 0.1);
            let f = detect_frontier_cells(&g);
            let cl = cluster_frontiers(&f, &g, 0.4);
            let mut all: Vec<usize> = cl.iter().flat_map(|c| c.cells.iter().copied()).collect();
            all.sort_unstable();
            assert_eq!(all, f);
            let mut marks = Marks::new(g.len());
            for c in &cl {
                assert_eq!(components(&g, &c.cells, &mut marks).len(), 1, "cluster must be connected");
            }
            // no cluster straddles two components
            let comps = components(&g, &f, &mut marks);
            for c in &cl {
                let owner = comps.iter().position(|k| k.binary_search(&c.cells[0]).is_ok()).unwrap();
                assert!(c.cells.iter().all(|x| comps[owner].binary_search(x).is_ok()));
            }
        }
    }

    /// Brute-force hull membership: inside some triangle or segment of input points.
    fn brute_in_hull(pts: &[P2], p: P2) -> bool {
        let n = pts.len();
        let on_seg = |a: P2, b: P2| {
            cross(a, b, p) == 0
                && p[0] >= a[0].min(b[0])
                && p[0] <= a[0].max(b[0])
                && p[1] >= a[1].min(b[1])
                && p[1] <= a[1].max(b[1])
        };
        for i in 0..n {
            if pts[i] == p {
                return true;
            }
            for j in i + 1..n {
                if on_seg(pts[i], pts[j]) {
                    return true;
                }
                for k in j + 1..n {
                    let (a, b, c) = (pts[i], pts[j], pts[k]);
                    let d1 = cross(a, b, p);
                    let d2 = cross(b, c, p);
                    let d3 = cross(c, a, p);
                    let neg = d1 < 0 || d2 < 0 || d3 < 0;
                    let pos = d1 > 0 || d2 > 0 || d3 > 0;
                    if !(neg && pos) && cross(a, b, c) != 0 {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn brute_trail(cluster: &FrontierCluster, g: &VoxelGrid, all: &[FrontierCluster], nd: f64) -> ClusterLabel {
        let cells: Vec<Cell> = cluster.cells.iter().map(|&i| g.cell(i)).collect();
        let pts: Vec<P2> = cells.iter().map(|c| [c[0] as i64, c[1] as i64]).collect();
        let zl = cells.iter().map(|c| c[2]).min().unwrap();
        let zh = cells.iter().map(|c| c[2]).max().unwrap();
        let [nx, ny, _] = g.dims();
        let mut ring_free = true;
        for y in -1..=ny as i64 {
            for x in -1..=nx as i64 {
                if brute_in_hull(&pts, [x, y]) {
                    continue;
                }
                let adj = (-1..=1).any(|dy| (-1..=1).any(|dx| brute_in_hull(&pts, [x + dx, y + dy])));
                if !adj {
                    continue;
                }
                for z in zl..=zh {
                    if let Some(s) = g.get([x as i32, y as i32, z]) {
                        ring_free &= s == CellState::Free;
                    }
                }
            }
        }
        let mut neighbors = 0;
        for o in all.iter().filter(|o| o.id != cluster.id) {
            let near = cluster.cells.iter().any(|&a| {
                o.cells.iter().any(|&b| {
                    (g.cell_to_world(g.cell(a)) - g.cell_to_world(g.cell(b))).norm() <= nd + 1e-9
                })
            });
            neighbors += near as usize;
        }
        if ring_free || neighbors <= 1 {
            ClusterLabel::Trail
        } else {
            ClusterLabel::Frontier
        }
    }

    #[test]
    fn hull_matches_brute_force() {
        let mut rng = SeededRng::new(3);
        for _ in 0..200 {
            let n = 1 + rng.below(8) as usize;
            let pts: Vec<P2> = (0..n).map(|_| [rng.below(7) as i64, rng.below(7) as i64]).collect();
            let hull = convex_hull_2d(pts.clone());
            for y in -1..8 {
                for x in -1..8 {
                    assert_eq!(in_hull(&hull, [x, y]), brute_in_hull(&pts, [x, y]), "{pts:?} {x},{y}");
                }
            }
        }
    }

    #[test]
    fn free_ringed_blob_is_trail() {
        let mut g = grid([12, 12, 1]);
        g.fill(CellState::Free);
        // unknown island with free frontier cells around it
        g.set([5, 5, 0], CellState::Unknown);
        g.set([6, 5, 0], CellState::Unknown);
        let f = detect_frontier_cells(&g);
        let cl = cluster_frontiers(&f, &g, 4.5);
        assert_eq!(cl.len(), 1);
        assert!(hull_ring_is_free(&cl[0].cells, &g));
        assert_eq!(classify_cluster(&cl[0], &g, &cl, 0.3), ClusterLabel::Trail);
    }

    /// Three clusters side by side along an unknown half-plane; the middle
    /// one has two neighbors and unknown beyond its hull.
    fn wall_scenario() -> (VoxelGrid, Vec<FrontierCluster>) {
        let mut g = grid([30, 10, 1]);
        for i in 0..g.len() {
            if g.cell(i)[1] < 5 {
                g.raise(i, CellState::Free);
            }
        }
        let f = detect_frontier_cells(&g);
        (g.clone(), cluster_frontiers(&f, &g, 0.9))
    }

    #[test]
    fn boundary_piece_with_two_neighbors_is_frontier() {
        let (g, cl) = wall_scenario();
        assert!(cl.len() >= 3);
        let at_end = |c: &FrontierCluster| c.cells.iter().any(|&i| [0, 29].contains(&g.cell(i)[0]));
        let mid = cl.iter().find(|c| !at_end(c)).unwrap();
        let end = cl.iter().find(|c| at_end(c)).unwrap();
        assert_eq!(cluster_neighbors(mid, &cl, &g, 0.3).len(), 2);
        assert_eq!(classify_cluster(mid, &g, &cl, 0.3), ClusterLabel::Frontier);
        assert_eq!(classify_cluster(mid, &g, &cl, 0.3), brute_trail(mid, &g, &cl, 0.3));
        // the end pieces have a single neighbor
        assert_eq!(classify_cluster(end, &g, &cl, 0.3), ClusterLabel::Trail);
    }

    fn scenario(rng: &mut SeededRng) -> VoxelGrid {
        let mut g = grid([14, 12, 2]);
        g.fill(CellState::Free);
        let islands = 1 + rng.below(4);
        for _ in 0..islands {
            let (x, y) = (rng.below(14) as i32, rng.below(12) as i32);
            let (w, h) = (1 + rng.below(4) as i32, 1 + rng.below(4) as i32);
            let z = rng.below(2) as i32;
            for dy in 0..h {
                for dx in 0..w {
                    if g.contains([x + dx, y + dy, z]) {
                        g.set([x + dx, y + dy, z], CellState::Unknown);
                    }
                }
            }
        }
        for _ in 0..rng.below(6) {
            let c = [rng.below(14) as i32, rng.below(12) as i32, rng.below(2) as i32];
            g.set(c, CellState::Occupied);
        }
        g
    }

    #[test]
    fn classifier_matches_brute_force_on_constructed_scenarios() {
        let mut rng = SeededRng::new(21);
        for _ in 0..30 {
            let g = scenario(&mut rng);
            let f = detect_frontier_cells(&g);
            let cl = cluster_frontiers(&f, &g, 0.6);
            let mut fm = FrontierMap::new(&g, 0.6, 0.3);
            let mut want: Vec<Vec<usize>> = cl.iter().map(|c| c.cells.clone()).collect();
            want.sort_unstable_by_key(|c| c[0]);
            assert_eq!(fm.partition(), want);
            for c in &cl {
                let want = brute_trail(c, &g, &cl, 0.3);
                assert_eq!(classify_cluster(c, &g, &cl, 0.3), want);
                let id = fm.cluster_of(c.cells[0]).unwrap();
                assert_eq!(fm.label(&g, id), want);
            }
        }
    }

    fn rotate_grid(g: &VoxelGrid) -> (VoxelGrid, impl Fn(Cell) -> Cell) {
        // 90 degrees counter-clockwise: (x, y) -> (ny - 1 - y, x)
        let [nx, ny, nz] = g.dims();
        let mut r = VoxelGrid::new(Vec3::zeros(), g.resolution(), [ny, nx, nz]).unwrap();
        let map = move |c: Cell| [ny as i32 - 1 - c[1], c[0], c[2]];
        for i in 0..g.len() {
            let c = g.cell(i);
            r.set(map(c), g.state(i));
        }
        (r, map)
    }

    #[test]
    fn classification_invariant_under_rotation_and_relabeling() {
        let mut rng = SeededRng::new(8);
        for _ in 0..15 {
            let g = scenario(&mut rng);
            let cl = cluster_frontiers(&detect_frontier_cells(&g), &g, 100.0);
            let (rg, map) = rotate_grid(&g);
            let rotated: Vec<FrontierCluster> = cl
                .iter()
                .map(|c| {
                    let mut cells: Vec<usize> = c.cells.iter().map(|&i| rg.index(map(g.cell(i))).unwrap()).collect();
                    cells.sort_unstable();
                    FrontierCluster::new(1000 - c.id, cells, &rg)
                })
                .collect();
            for (a, b) in cl.iter().zip(&rotated) {
                assert_eq!(classify_cluster(a, &g, &cl, 0.3), classify_cluster(b, &rg, &rotated, 0.3));
            }
        }
    }

    #[test]
    fn viewpoint_for_single_cell_faces_it() {
        let mut g = grid([60, 60, 1]);
        g.fill(CellState::Free);
        let cell = [30, 30, 0];
        let c = FrontierCluster::new(0, vec![g.index(cell).unwrap()], &g);
        let cam = DepthCamera::for_resolution(0.1);
        let vp = sample_viewpoint(&c, &g, &cam, &ViewpointParams::default(), None, |_| true).unwrap();
        assert_eq!(vp.coverage, 1);
        let to = c.centroid - vp.position;
        assert!(crate::angle_diff(vp.yaw, to.y.atan2(to.x)) < 1e-9);
        // smallest radius, angle index 0
        assert!((vp.position - (c.centroid + Vec3::new(1.0, 0.0, 0.0))).norm() < 1e-9);
        assert!(sample_viewpoint(&c, &g, &cam, &ViewpointParams::default(), None, |_| false).is_none());
    }

    #[test]
    fn viewpoint_sees_through_gap() {
        // cluster pocket above a wall band y in 40..44, reachable by sight only
        // through a one-cell gap at x = 34
        let mut g = grid([60, 60, 1]);
        g.fill(CellState::Free);
        for y in 40..60 {
            for x in 0..60 {
                let pocket = y == 44 && (30..39).contains(&x);
                let gap = x == 34 && y < 44;
                if !pocket && !gap {
                    g.set([x, y, 0], CellState::Occupied);
                }
            }
        }
        let cells: Vec<usize> = (30..39).map(|x| g.index([x, 44, 0]).unwrap()).collect();
        let c = FrontierCluster::new(0, cells, &g);
        let cam = DepthCamera::for_resolution(0.1);
        let params = ViewpointParams::default();
        let z = c.centroid.z;
        let valid = |p: &Vec3| g.get(g.cell_of(p)) == Some(CellState::Free);
        let vp = sample_viewpoint(&c, &g, &cam, &params, None, valid).unwrap();
        // exhaustive oracle over the same candidate set
        let targets: Vec<Vec3> = c.cells.iter().map(|&i| g.cell_to_world(g.cell(i))).collect();
        let mut best = (0usize, f64::INFINITY);
        for k in 0..params.n_radii {
            let r = params.r_min + (params.r_max - params.r_min) * k as f64 / 2.0;
            for a in 0..params.n_angles {
                let th = std::f64::consts::TAU * a as f64 / 16.0;
                let p = Vec3::new(c.centroid.x + r * th.cos(), c.centroid.y + r * th.sin(), z);
                if !valid(&p) {
                    continue;
                }
                let pose = Pose::new(p, th + std::f64::consts::PI);
                let n = coverage_from(&g, &cam, &pose, &targets);
                if n > best.0 {
                    best = (n, r);
                }
            }
        }
        assert_eq!(vp.coverage, best.0);
        assert!(vp.coverage > 0);
        assert!(vp.position.y < 4.0, "viewpoint looks through the gap");
    }

    #[test]
    fn viewpoint_missing_when_blocked() {
        let mut g = grid([40, 40, 1]);
        g.fill(CellState::Occupied);
        g.set([20, 20, 0], CellState::Free);
        let c = FrontierCluster::new(0, vec![g.index([20, 20, 0]).unwrap()], &g);
        let cam = DepthCamera::for_resolution(0.1);
        let valid = |p: &Vec3| g.get(g.cell_of(p)) == Some(CellState::Free);
        assert!(sample_viewpoint(&c, &g, &cam, &ViewpointParams::default(), None, valid).is_none());
    }

    #[test]
    fn strikes_kill_cluster() {
        let mut g = grid([10, 10, 1]);
        g.fill(CellState::Free);
        g.set([5, 5, 0], CellState::Unknown);
        let mut fm = FrontierMap::new(&g, 4.5, 0.3);
        let id = fm.live_ids()[0];
        assert!(!fm.strike(id));
        assert!(!fm.strike(id));
        assert!(fm.strike(id));
        assert_eq!(fm.live_count(), 0);
        assert_eq!(fm.dead_count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Applying random raise batches incrementally gives the same
        /// partition as clustering from scratch after every batch.
        #[test]
        fn incremental_equals_full(seed in any::<u64>(), extent in 0.2f64..1.2) {
            let mut rng = SeededRng::new(seed);
            let mut g = random_grid(&mut rng, [12, 10, 3], 0.3, 0.05);
            let mut fm = FrontierMap::new(&g, extent, 0.3);
            for _ in 0..6 {
                let mut changed = Vec::new();
                for _ in 0..rng.below(40) {
                    let i = rng.below(g.len() as u64) as usize;
                    let s = if rng.unit() < 0.8 { CellState::Free } else { CellState::Occupied };
                    if g.raise(i, s) {
                        changed.push(i);
                    }
                }
                fm.update(&g, &changed);
                fm.recluster(&g);
                let full: Vec<Vec<usize>> = cluster_frontiers(&detect_frontier_cells(&g), &g, extent)
                    .into_iter()
                    .map(|c| c.cells)
                    .collect();
                let mut full = full;
                full.sort_unstable_by_key(|c| c[0]);
                prop_assert_eq!(fm.partition(), full);
                for i in 0..g.len() {
                    prop_assert_eq!(fm.is_frontier(i), is_frontier(&g, i));
                }
            }
        }
    }
}
