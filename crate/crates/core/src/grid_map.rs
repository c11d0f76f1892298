//! Ternary voxel map.
//!
//! Cells are `Unknown < Free < Occupied`; every update is a per-cell maximum,
//! so a cell can never be demoted. Cell `[x, y, z]` covers the half-open box
//! `origin + res * [x, x+1) x [y, y+1) x [z, z+1)` and is stored at linear
//! index `x + nx * (y + ny * z)`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sensor::DepthScan;
use crate::{Error, Result, Vec3};

/// Integer cell coordinate `[x, y, z]`. Ordering is lexicographic.
pub type Cell = [i32; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellState {
    #[default]
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

impl CellState {
    pub fn is_known(self) -> bool {
        self != CellState::Unknown
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(CellState::Unknown),
            1 => Some(CellState::Free),
            2 => Some(CellState::Occupied),
            _ => None,
        }
    }
}

pub const FACE_OFFSETS: [Cell; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// The 26 neighbor offsets in lexicographic order.
pub fn neighbor_offsets_26() -> impl Iterator<Item = Cell> {
    (-1..=1).flat_map(|x| {
        (-1..=1).flat_map(move |y| (-1..=1).map(move |z| [x, y, z]))
    })
    .filter(|o| *o != [0, 0, 0])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub known_cells: usize,
    pub free_cells: usize,
    pub occupied_cells: usize,
    pub explored_volume: f64,
}

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    origin: Vec3,
    resolution: f64,
    dims: [usize; 3],
    cells: Vec<CellState>,
    revision: u64,
    free: usize,
    occupied: usize,
}

impl PartialEq for VoxelGrid {
    /// Geometry and cell contents; the revision counter is bookkeeping.
    fn eq(&self, other: &Self) -> bool {
        self.same_geometry(other) && self.cells == other.cells
    }
}

impl VoxelGrid {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidParameter(format!("resolution must be > 0, got {resolution}")));
        }
        if dims.iter().any(|d| *d == 0 || *d > i32::MAX as usize) {
            return Err(Error::InvalidParameter(format!("invalid grid dims {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            resolution,
            dims,
            cells: vec![CellState::Unknown; n],
            revision: 0,
            free: 0,
            occupied: 0,
        })
    }

    /// Grid covering the box `[min, max]`. Sizes that are within 1e-6 cells of
    /// an integer are rounded rather than ceiled.
    pub fn covering(min: Vec3, max: Vec3, resolution: f64) -> Result<Self> {
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let n = (max[k] - min[k]) / resolution;
            let r = n.round();
            dims[k] = if (n - r).abs() < 1e-6 { r } else { n.ceil() } as usize;
        }
        Self::new(min, resolution, dims)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    /// Upper corner of the grid box.
    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.origin == other.origin && self.resolution == other.resolution && self.dims == other.dims
    }

    pub fn contains(&self, c: Cell) -> bool {
        (0..3).all(|k| c[k] >= 0 && (c[k] as usize) < self.dims[k])
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        self.contains(c).then(|| self.index_unchecked(c))
    }

    #[inline]
    pub fn index_unchecked(&self, c: Cell) -> usize {
        c[0] as usize + self.dims[0] * (c[1] as usize + self.dims[1] * c[2] as usize)
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> Cell {
        let x = idx % self.dims[0];
        let yz = idx / self.dims[0];
        [x as i32, (yz % self.dims[1]) as i32, (yz / self.dims[1]) as i32]
    }

    pub fn get(&self, c: Cell) -> Option<CellState> {
        self.index(c).map(|i| self.cells[i])
    }

    #[inline]
    pub fn state(&self, idx: usize) -> CellState {
        self.cells[idx]
    }

    /// Continuous grid coordinates (cell units) of a world point.
    fn grid_coords(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.resolution
    }

    /// Floor binning of a point that may lie outside the grid.
    pub fn cell_of(&self, p: &Vec3) -> Cell {
        let g = self.grid_coords(p);
        [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32]
    }

    pub fn world_to_cell(&self, p: &Vec3) -> Result<Cell> {
        let c = self.cell_of(p);
        if self.contains(c) {
            Ok(c)
        } else {
            Err(Error::OutOfRange { x: p.x, y: p.y, z: p.z })
        }
    }

    pub fn cell_to_world(&self, c: Cell) -> Vec3 {
        self.origin
            + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.resolution
    }

    /// Raises a cell to at least `state`. Returns true if it changed.
    #[inline]
    pub fn raise(&mut self, idx: usize, state: CellState) -> bool {
        let old = self.cells[idx];
        if state <= old {
            return false;
        }
        match old {
            CellState::Free => self.free -= 1,
            CellState::Occupied => self.occupied -= 1,
            CellState::Unknown => {}
        }
        match state {
            CellState::Free => self.free += 1,
            CellState::Occupied => self.occupied += 1,
            CellState::Unknown => {}
        }
        self.cells[idx] = state;
        true
    }

    /// Sets a cell to an arbitrary state, bypassing the max rule. Test and
    /// scenario construction only.
    pub fn set(&mut self, c: Cell, state: CellState) {
        let idx = self.index(c).expect("cell inside grid");
        let old = self.cells[idx];
        match old {
            CellState::Free => self.free -= 1,
            CellState::Occupied => self.occupied -= 1,
            CellState::Unknown => {}
        }
        self.cells[idx] = CellState::Unknown;
        self.raise(idx, state);
    }

    pub fn fill(&mut self, state: CellState) {
        for i in 0..self.cells.len() {
            let c = self.cell(i);
            self.set(c, state);
        }
    }

    pub fn bump_revision(&mut self) {
        self.revision += 1;
    }

    /// Amanatides–Woo walk over the cells crossed by the half-open segment
    /// `[start, end)`, in order, clipped to the grid. The walk stops early when
    /// `visit` returns false. Consecutive cells always share a face, so an
    /// exact edge or corner crossing also visits one cell that the segment
    /// only touches.
    pub fn walk_segment(&self, start: &Vec3, end: &Vec3, mut visit: impl FnMut(Cell) -> bool) {
        let p0 = self.grid_coords(start);
        let p1 = self.grid_coords(end);
        let d = p1 - p0;
        // clip [0, 1) against the box [0, dims]
        let (mut t_lo, mut t_hi) = (0.0f64, 1.0f64);
        for k in 0..3 {
            let hi = self.dims[k] as f64;
            if d[k].abs() < 1e-300 {
                if p0[k] < 0.0 || p0[k] >= hi {
                    return;
                }
            } else {
                let a = (0.0 - p0[k]) / d[k];
                let b = (hi - p0[k]) / d[k];
                t_lo = t_lo.max(a.min(b));
                t_hi = t_hi.min(a.max(b));
            }
        }
        if t_lo >= t_hi {
            return;
        }
        let entry = p0 + d * t_lo;
        let mut cell = [0i32; 3];
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let mut c = entry[k].floor() as i32;
            // entering through the upper face lands exactly on dims
            if d[k] < 0.0 && entry[k] == entry[k].floor() && t_lo > 0.0 {
                c -= 1;
            }
            cell[k] = c.clamp(0, self.dims[k] as i32 - 1);
            if d[k] > 0.0 {
                step[k] = 1;
                t_delta[k] = 1.0 / d[k];
                t_max[k] = (cell[k] as f64 + 1.0 - p0[k]) / d[k];
            } else if d[k] < 0.0 {
                step[k] = -1;
                t_delta[k] = -1.0 / d[k];
                t_max[k] = (cell[k] as f64 - p0[k]) / d[k];
            }
        }
        const EPS: f64 = 1e-12;
        loop {
            if !visit(cell) {
                return;
            }
            let t_next = t_max[0].min(t_max[1]).min(t_max[2]);
            if t_next >= t_hi - EPS {
                return;
            }
            let k = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            cell[k] += step[k];
            t_max[k] += t_delta[k];
            if !self.contains(cell) {
                return;
            }
        }
    }

    /// Carves every ray of `scan` into the map: crossed cells become Free and
    /// the cell containing a hit point becomes Occupied. Returns the linear
    /// indices of cells whose state changed, sorted and deduplicated. The
    /// revision advances once per call.
    pub fn integrate_scan(&mut self, scan: &DepthScan) -> Vec<usize> {
        self.integrate_scan_visit(scan, |_| {})
    }

    /// [`VoxelGrid::integrate_scan`] that also reports every cell the scan
    /// observes, changed or not, to `observed` (possibly more than once).
    pub fn integrate_scan_visit(&mut self, scan: &DepthScan, mut observed: impl FnMut(usize)) -> Vec<usize> {
        let mut changed = Vec::new();
        for ray in &scan.rays {
            let end = ray.endpoint(&scan.origin);
            let mut walk = Vec::new();
            self.walk_segment(&scan.origin, &end, |c| {
                walk.push(c);
                true
            });
            for c in walk {
                let idx = self.index_unchecked(c);
                observed(idx);
                if self.raise(idx, CellState::Free) {
                    changed.push(idx);
                }
            }
            if ray.hit {
                let inside = end + ray.direction * (1e-6 * self.resolution);
                if let Some(idx) = self.index(self.cell_of(&inside)) {
                    observed(idx);
                    if self.raise(idx, CellState::Occupied) {
                        changed.push(idx);
                    }
                }
            }
        }
        self.revision += 1;
        changed.sort_unstable();
        changed.dedup();
        changed
    }

    /// Cell-wise maximum of two maps with identical geometry.
    pub fn merge(&self, other: &VoxelGrid) -> Result<VoxelGrid> {
        let mut out = self.clone();
        out.merge_from(other)?;
        out.revision = self.revision.max(other.revision);
        Ok(out)
    }

    /// In-place merge; returns the changed linear indices in ascending order.
    pub fn merge_from(&mut self, other: &VoxelGrid) -> Result<Vec<usize>> {
        if !self.same_geometry(other) {
            return Err(Error::GeometryMismatch(format!(
                "origin {:?}/{:?}, resolution {}/{}, dims {:?}/{:?}",
                self.origin.as_slice(),
                other.origin.as_slice(),
                self.resolution,
                other.resolution,
                self.dims,
                other.dims
            )));
        }
        let mut changed = Vec::new();
        for (i, s) in other.cells.iter().enumerate() {
            if self.raise(i, *s) {
                changed.push(i);
            }
        }
        if !changed.is_empty() {
            self.revision += 1;
        }
        Ok(changed)
    }

    /// Applies `(index, state)` pairs under the max rule; returns changed indices.
    pub fn apply_cells(&mut self, cells: &[(u32, CellState)]) -> Vec<usize> {
        let mut changed: Vec<usize> = cells
            .iter()
            .filter_map(|&(i, s)| self.raise(i as usize, s).then_some(i as usize))
            .collect();
        if !changed.is_empty() {
            self.revision += 1;
        }
        changed.sort_unstable();
        changed.dedup();
        changed
    }

    pub fn coverage(&self) -> CoverageStats {
        let known = self.free + self.occupied;
        CoverageStats {
            known_cells: known,
            free_cells: self.free,
            occupied_cells: self.occupied,
            explored_volume: known as f64 * self.resolution.powi(3),
        }
    }

    /// Marks every Free cell whose center lies within `margin` of an Occupied
    /// cell center as Occupied. Unknown cells are left alone.
    pub fn inflate_occupied(&self, margin: f64) -> VoxelGrid {
        let mut out = self.clone();
        let r = margin / self.resolution;
        if r <= 0.0 {
            return out;
        }
        let reach = (r + 1e-9).floor() as i32;
        let reach_z = reach.min(self.dims[2] as i32 - 1);
        let r2 = r * r + 1e-9;
        let mut offsets = Vec::new();
        for dz in -reach_z..=reach_z {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    if d2 <= r2 && (dx, dy, dz) != (0, 0, 0) {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        for i in 0..self.cells.len() {
            if self.cells[i] != CellState::Occupied {
                continue;
            }
            let c = self.cell(i);
            for o in &offsets {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if let Some(j) = self.index(n) {
                    if self.cells[j] == CellState::Free {
                        out.raise(j, CellState::Occupied);
                    }
                }
            }
        }
        out
    }

    /// Conservative planning map: every Free cell within `margin` of an
    /// Occupied cell, an Unknown cell, or the horizontal edge of the grid
    /// becomes Occupied. Unknown cells stay Unknown.
    pub fn inflate_blocking(&self, margin: f64) -> VoxelGrid {
        let mut out = self.clone();
        let r = margin / self.resolution;
        if r <= 0.0 {
            return out;
        }
        let reach = (r + 1e-9).floor() as i32;
        let reach_z = reach.min(self.dims[2] as i32 - 1);
        let r2 = r * r + 1e-9;
        let mut offsets = Vec::new();
        for dz in -reach_z..=reach_z {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    if d2 <= r2 && (dx, dy, dz) != (0, 0, 0) {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        let near: Vec<Cell> = neighbor_offsets_26().collect();
        for i in 0..self.cells.len() {
            let c = self.cell(i);
            let source = match self.cells[i] {
                CellState::Occupied => true,
                // interior Unknown cells are shadowed by the boundary ones
                CellState::Unknown => near.iter().any(|o| {
                    self.get([c[0] + o[0], c[1] + o[1], c[2] + o[2]]).is_some_and(|s| s.is_known())
                }),
                CellState::Free => {
                    let edge = [c[0], c[1], self.dims[0] as i32 - 1 - c[0], self.dims[1] as i32 - 1 - c[1]];
                    if edge.iter().any(|&k| (k as f64 + 0.5) * self.resolution < margin) {
                        out.raise(i, CellState::Occupied);
                    }
                    false
                }
            };
            if !source {
                continue;
            }
            for o in &offsets {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if let Some(j) = self.index(n) {
                    if self.cells[j] == CellState::Free {
                        out.raise(j, CellState::Occupied);
                    }
                }
            }
        }
        out
    }

    /// Collapses the z-layers `[z_lo, z_hi]` into a single-layer grid: a column
    /// is Occupied if any layer is, else Unknown if any layer is, else Free.
    pub fn horizontal_band(&self, z_lo: usize, z_hi: usize) -> VoxelGrid {
        let z_hi = z_hi.min(self.dims[2] - 1);
        let z_lo = z_lo.min(z_hi);
        let mut origin = self.origin;
        origin.z += z_lo as f64 * self.resolution;
        let mut out = VoxelGrid::new(origin, self.resolution, [self.dims[0], self.dims[1], 1])
            .expect("valid geometry");
        let layer = self.dims[0] * self.dims[1];
        for i in 0..layer {
            let mut occupied = false;
            let mut unknown = false;
            for z in z_lo..=z_hi {
                match self.cells[i + z * layer] {
                    CellState::Occupied => occupied = true,
                    CellState::Unknown => unknown = true,
                    CellState::Free => {}
                }
            }
            let s = if occupied {
                CellState::Occupied
            } else if unknown {
                CellState::Unknown
            } else {
                CellState::Free
            };
            out.raise(i, s);
        }
        out.revision = self.revision;
        out
    }

    /// Debug snapshot: one JSON header line, then one byte per cell.
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        let header = SnapshotHeader {
            format: 1,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            resolution: self.resolution,
            dims: self.dims,
            revision: self.revision,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let bytes: Vec<u8> = self.cells.iter().map(|s| *s as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_snapshot(r: impl Read) -> Result<VoxelGrid> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: SnapshotHeader = serde_json::from_str(line.trim_end())?;
        let mut grid = VoxelGrid::new(Vec3::from(header.origin), header.resolution, header.dims)?;
        let mut bytes = Vec::with_capacity(grid.len());
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != grid.len() {
            return Err(Error::Parse(format!(
                "snapshot holds {} cells, header says {}",
                bytes.len(),
                grid.len()
            )));
        }
        for (i, b) in bytes.into_iter().enumerate() {
            let s = CellState::from_u8(b).ok_or_else(|| Error::Parse(format!("bad cell byte {b}")))?;
            grid.raise(i, s);
        }
        grid.revision = header.revision;
        Ok(grid)
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_snapshot(std::io::BufWriter::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: u32,
    origin: [f64; 3],
    resolution: f64,
    dims: [usize; 3],
    revision: u64,
}
