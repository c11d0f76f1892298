//! Ground-truth forest worlds.
//!
//! Trees are vertical cylinders standing on the ground plane `z = 0`. A world
//! is an axis-aligned box `[0, extent]`; everything outside the box counts as
//! occupied. Generation is driven by [`SeededRng`], so a `(seed, params)` pair
//! always yields the same world.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, SeededRng};
use crate::{Error, Result, Vec3};

/// Spacing between consecutive spawn points, meters.
pub const SPAWN_SPACING: f64 = 2.0;

/// Distance of the spawn row from the `x = 0` wall, meters.
pub const SPAWN_OFFSET_X: f64 = 2.0;

pub const WORLD_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeObstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
}

impl TreeObstacle {
    /// Horizontal distance from the trunk axis to `p`.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        ((p.x - self.x).powi(2) + (p.y - self.y).powi(2)).sqrt()
    }

    /// Closed-surface containment.
    pub fn contains(&self, p: &Vec3) -> bool {
        p.z >= 0.0 && p.z <= self.height && self.axis_distance(p) <= self.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityRegion {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Trees per square meter.
    pub density: f64,
}

impl DensityRegion {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    fn overlap_area(&self, other: &DensityRegion) -> f64 {
        let w = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let h = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// Splits the horizontal extent into four equal quadrants with the given
/// densities, ordered (low x, low y), (high x, low y), (low x, high y), (high x, high y).
pub fn quadrant_regions(extent: &Vec3, densities: [f64; 4]) -> Vec<DensityRegion> {
    let (hx, hy) = (extent.x / 2.0, extent.y / 2.0);
    let corners = [
        ([0.0, 0.0], [hx, hy]),
        ([hx, 0.0], [extent.x, hy]),
        ([0.0, hy], [hx, extent.y]),
        ([hx, hy], [extent.x, extent.y]),
    ];
    corners
        .iter()
        .zip(densities)
        .map(|(&(min, max), density)| DensityRegion { min, max, density })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub extent: Vec3,
    pub trees: Vec<TreeObstacle>,
    pub spawn_points: Vec<Vec3>,
    pub seed: u64,
    pub regions: Option<Vec<DensityRegion>>,
}

/// Parameters shared by the homogeneous and tiled generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub seed: u64,
    pub extent: [f64; 3],
    /// Trees per square meter (ignored when `regions` is set).
    pub density: f64,
    pub radius_range: [f64; 2],
    pub spawn_clearance: f64,
    pub n_spawns: usize,
    /// Tree height; `None` means full world height.
    pub tree_height: Option<f64>,
    pub regions: Option<Vec<DensityRegion>>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: [30.0, 30.0, 2.0],
            density: 0.05,
            radius_range: [0.1, 0.4],
            spawn_clearance: 1.0,
            n_spawns: 3,
            tree_height: None,
            regions: None,
        }
    }
}

impl ForestParams {
    pub fn extent_vec(&self) -> Vec3 {
        Vec3::new(self.extent[0], self.extent[1], self.extent[2])
    }

    pub fn generate(&self) -> Result<World> {
        match &self.regions {
            Some(regions) => generate_tiled_forest(self, regions),
            None => generate_forest(self),
        }
    }

    fn validate(&self) -> Result<()> {
        let e = self.extent;
        if !(e.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(format!("extent must be positive, got {e:?}")));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "radius_range must satisfy 0 < min <= max, got {:?}",
                self.radius_range
            )));
        }
        if 2.0 * hi >= e[0].min(e[1]) {
            return Err(Error::InvalidParameter("trees do not fit in the extent".into()));
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::InvalidParameter(format!("density must be >= 0, got {}", self.density)));
        }
        if self.spawn_clearance < 0.0 {
            return Err(Error::InvalidParameter("spawn_clearance must be >= 0".into()));
        }
        if let Some(h) = self.tree_height {
            if h <= 0.0 {
                return Err(Error::InvalidParameter("tree_height must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Spawn row: `n` points at `x = 2 m`, centred on the `y` midline, 2 m apart,
/// at half the world height.
pub fn spawn_row(extent: &Vec3, n: usize) -> Result<Vec<Vec3>> {
    let span = SPAWN_SPACING * n.saturating_sub(1) as f64;
    if span >= extent.y || SPAWN_OFFSET_X >= extent.x {
        return Err(Error::InvalidParameter(format!(
            "{n} spawn points do not fit in extent {:?}",
            extent.as_slice()
        )));
    }
    let x = SPAWN_OFFSET_X.min(extent.x / 2.0);
    let y0 = extent.y / 2.0 - span / 2.0;
    Ok((0..n)
        .map(|i| Vec3::new(x, y0 + SPAWN_SPACING * i as f64, extent.z / 2.0))
        .collect())
}

struct TreeSampler<'a> {
    extent: Vec3,
    params: &'a ForestParams,
    spawns: &'a [Vec3],
    height: f64,
}

impl TreeSampler<'_> {
    /// Places `count` trees with centers in the `[min, max]` rectangle.
    fn place(
        &self,
        rng: &mut SeededRng,
        count: usize,
        min: [f64; 2],
        max: [f64; 2],
        out: &mut Vec<TreeObstacle>,
    ) -> Result<()> {
        let [rlo, rhi] = self.params.radius_range;
        let max_attempts = 1000 * count;
        let mut attempts = 0;
        let mut placed = 0;
        while placed < count {
            if attempts >= max_attempts {
                return Err(Error::OverDense { requested: count, placed, attempts });
            }
            attempts += 1;
            let radius = rng.uniform(rlo, rhi);
            let x_lo = min[0].max(radius);
            let x_hi = max[0].min(self.extent.x - radius);
            let y_lo = min[1].max(radius);
            let y_hi = max[1].min(self.extent.y - radius);
            let x = rng.uniform(x_lo, x_hi);
            let y = rng.uniform(y_lo, y_hi);
            if x_hi < x_lo || y_hi < y_lo {
                continue;
            }
            let tree = TreeObstacle { x, y, radius, height: self.height };
            let blocked = self.spawns.iter().any(|s| {
                tree.axis_distance(s) < radius + self.params.spawn_clearance
            });
            if blocked {
                continue;
            }
            out.push(tree);
            placed += 1;
        }
        Ok(())
    }
}

/// Homogeneous forest: `round(density * x * y)` trees, uniform centers,
/// rejection-resampled away from the spawn points.
pub fn generate_forest(params: &ForestParams) -> Result<World> {
    params.validate()?;
    let extent = params.extent_vec();
    let spawns = spawn_row(&extent, params.n_spawns)?;
    let count = (params.density * extent.x * extent.y).round() as usize;
    let sampler = TreeSampler {
        extent,
        params,
        spawns: &spawns,
        height: params.tree_height.unwrap_or(extent.z),
    };
    let mut rng = SeededRng::new(params.seed);
    let mut trees = Vec::with_capacity(count);
    sampler.place(&mut rng, count, [0.0, 0.0], [extent.x, extent.y], &mut trees)?;
    Ok(World { extent, trees, spawn_points: spawns, seed: params.seed, regions: None })
}

/// Checks that the regions tile `[0, x] x [0, y]` exactly, without overlap.
pub fn validate_regions(extent: &Vec3, regions: &[DensityRegion]) -> Result<()> {
    if regions.is_empty() {
        return Err(Error::InvalidRegions("no regions given".into()));
    }
    let eps = 1e-9 * extent.x * extent.y;
    for (i, r) in regions.iter().enumerate() {
        if !(r.min[0] < r.max[0] && r.min[1] < r.max[1]) {
            return Err(Error::InvalidRegions(format!("region {i} has min >= max")));
        }
        if r.min[0] < 0.0 || r.min[1] < 0.0 || r.max[0] > extent.x || r.max[1] > extent.y {
            return Err(Error::InvalidRegions(format!("region {i} leaves the extent")));
        }
        if !(r.density >= 0.0 && r.density.is_finite()) {
            return Err(Error::InvalidRegions(format!("region {i} has negative density")));
        }
        for (j, other) in regions.iter().enumerate().skip(i + 1) {
            if r.overlap_area(other) > eps {
                return Err(Error::InvalidRegions(format!("regions {i} and {j} overlap")));
            }
        }
    }
    let covered: f64 = regions.iter().map(DensityRegion::area).sum();
    if (covered - extent.x * extent.y).abs() > eps.max(1e-9) {
        return Err(Error::InvalidRegions(format!(
            "regions cover {covered} m^2 of {} m^2",
            extent.x * extent.y
        )));
    }
    Ok(())
}

/// Non-homogeneous forest. Region `k` draws from its own stream
/// (`derive_seed(seed, k)`), so a single full-extent region reproduces
/// [`generate_forest`] exactly.
pub fn generate_tiled_forest(params: &ForestParams, regions: &[DensityRegion]) -> Result<World> {
    params.validate()?;
    let extent = params.extent_vec();
    validate_regions(&extent, regions)?;
    let spawns = spawn_row(&extent, params.n_spawns)?;
    let sampler = TreeSampler {
        extent,
        params,
        spawns: &spawns,
        height: params.tree_height.unwrap_or(extent.z),
    };
    let mut trees = Vec::new();
    for (k, region) in regions.iter().enumerate() {
        let count = (region.density * region.area()).round() as usize;
        let mut rng = SeededRng::new(derive_seed(params.seed, k as u64));
        sampler.place(&mut rng, count, region.min, region.max, &mut trees)?;
    }
    Ok(World {
        extent,
        trees,
        spawn_points: spawns,
        seed: params.seed,
        regions: Some(regions.to_vec()),
    })
}

impl World {
    pub fn contains_point(&self, p: &Vec3) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.z >= 0.0
            && p.x <= self.extent.x
            && p.y <= self.extent.y
            && p.z <= self.extent.z
    }

    /// Ground-truth occupancy: inside a tree (closed surface) or outside the box.
    pub fn query_occupancy(&self, p: &Vec3) -> bool {
        !self.contains_point(p) || self.trees.iter().any(|t| t.contains(p))
    }

    /// Trees whose trunk axis lies within `radius` (plus the trunk radius) of `p` horizontally.
    pub fn trees_near<'a>(&'a self, p: &'a Vec3, radius: f64) -> impl Iterator<Item = &'a TreeObstacle> + 'a {
        self.trees.iter().filter(move |t| t.axis_distance(p) <= radius + t.radius)
    }

    /// Smallest horizontal clearance from `p` to any tree surface reaching
    /// `p.z`, or infinity in an empty world.
    pub fn clearance(&self, p: &Vec3) -> f64 {
        self.trees
            .iter()
            .filter(|t| p.z <= t.height)
            .map(|t| t.axis_distance(p) - t.radius)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return Err(Error::InvalidWorld("extent must be positive".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            if !(t.radius > 0.0 && t.height > 0.0) {
                return Err(Error::InvalidWorld(format!("tree {i} has non-positive radius or height")));
            }
            let inside = t.x - t.radius >= 0.0
                && t.y - t.radius >= 0.0
                && t.x + t.radius <= e.x
                && t.y + t.radius <= e.y
                && t.height <= e.z + 1e-9;
            if !inside {
                return Err(Error::InvalidWorld(format!(
                    "tree {i} at ({}, {}) r={} lies outside the extent",
                    t.x, t.y, t.radius
                )));
            }
        }
        for (i, s) in self.spawn_points.iter().enumerate() {
            if !self.contains_point(s) {
                return Err(Error::InvalidWorld(format!("spawn {i} lies outside the extent")));
            }
            if self.trees.iter().any(|t| t.contains(s)) {
                return Err(Error::InvalidWorld(format!("spawn {i} is inside a tree")));
            }
        }
        if let Some(regions) = &self.regions {
            validate_regions(&self.extent, regions)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WorldFile {
            format: WORLD_FORMAT,
            seed: self.seed,
            extent: [self.extent.x, self.extent.y, self.extent.z],
            trees: self.trees.clone(),
            spawns: self.spawn_points.iter().map(|s| [s.x, s.y, s.z]).collect(),
            regions: self.regions.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<World> {
        let file: WorldFile = serde_json::from_str(text)?;
        if file.format != WORLD_FORMAT {
            return Err(Error::Parse(format!("unsupported world format {}", file.format)));
        }
        let world = World {
            extent: Vec3::from(file.extent),
            trees: file.trees,
            spawn_points: file.spawns.into_iter().map(Vec3::from).collect(),
            seed: file.seed,
            regions: file.regions,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<World> {
        World::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    format: u32,
    seed: u64,
    extent: [f64; 3],
    trees: Vec<TreeObstacle>,
    spawns: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regions: Option<Vec<DensityRegion>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64, extent: [f64; 3], density: f64) -> ForestParams {
        ForestParams { seed, extent, density, ..Default::default() }
    }

    #[test]
    fn sparse_fifty_meter_forest_has_125_trees() {
        let w = generate_forest(&params(1, [50.0, 50.0, 2.0], 0.05)).unwrap();
        assert_eq!(w.trees.len(), 125);
        w.validate().unwrap();
    }

    #[test]
    fn zero_density_is_empty() {
        let w = generate_forest(&params(7, [12.0, 9.0, 3.0], 0.0)).unwrap();
        assert!(w.trees.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = params(1, [30.0, 30.0, 2.0], 0.15);
        let a = generate_forest(&p).unwrap();
        let b = generate_forest(&p).unwrap();
        assert_eq!(a, b);
        let bits = |w: &World| w.trees.iter().map(|t| t.x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_forest(&params(2, [30.0, 30.0, 2.0], 0.15)).unwrap();
        assert_ne!(a.trees, c.trees);
    }

    #[test]
    fn spawns_keep_clearance() {
        let p = params(3, [30.0, 30.0, 2.0], 0.2);
        let w = generate_forest(&p).unwrap();
        for s in &w.spawn_points {
            for t in &w.trees {
                assert!(t.axis_distance(s) >= t.radius + p.spawn_clearance);
            }
        }
    }

    #[test]
    fn over_dense_request_fails() {
        // the clearance disc around the spawn covers the whole extent
        let mut p = params(1, [6.0, 6.0, 2.0], 0.5);
        p.spawn_clearance = 10.0;
        p.n_spawns = 1;
        assert!(matches!(generate_forest(&p), Err(Error::OverDense { .. })));
    }

    #[test]
    fn tiled_counts_follow_each_region() {
        let extent = Vec3::new(100.0, 200.0, 2.0);
        let regions = quadrant_regions(&extent, [0.05, 0.10, 0.15, 0.20]);
        let p = ForestParams { seed: 4, extent: [100.0, 200.0, 2.0], ..Default::default() };
        let w = generate_tiled_forest(&p, &regions).unwrap();
        for r in &regions {
            let inside = w
                .trees
                .iter()
                .filter(|t| t.x >= r.min[0] && t.x < r.max[0] && t.y >= r.min[1] && t.y < r.max[1])
                .count();
            assert_eq!(inside, (r.density * r.area()).round() as usize);
        }
    }

    #[test]
    fn single_region_matches_homogeneous() {
        let p = params(9, [30.0, 20.0, 2.0], 0.1);
        let region = DensityRegion { min: [0.0, 0.0], max: [30.0, 20.0], density: 0.1 };
        let tiled = generate_tiled_forest(&p, &[region]).unwrap();
        let flat = generate_forest(&p).unwrap();
        assert_eq!(tiled.trees, flat.trees);
    }

    #[test]
    fn empty_region_has_no_trees() {
        let extent = Vec3::new(40.0, 40.0, 2.0);
        let regions = quadrant_regions(&extent, [0.0, 0.1, 0.1, 0.1]);
        let p = ForestParams { seed: 5, extent: [40.0, 40.0, 2.0], ..Default::default() };
        let w = generate_tiled_forest(&p, &regions).unwrap();
        assert!(!w.trees.iter().any(|t| t.x < 20.0 && t.y < 20.0));
    }

    #[test]
    fn overlapping_or_partial_regions_rejected() {
        let extent = Vec3::new(10.0, 10.0, 2.0);
        let a = DensityRegion { min: [0.0, 0.0], max: [6.0, 10.0], density: 0.1 };
        let b = DensityRegion { min: [5.0, 0.0], max: [10.0, 10.0], density: 0.1 };
        assert!(validate_regions(&extent, &[a, b]).is_err());
        let c = DensityRegion { min: [6.0, 0.0], max: [10.0, 5.0], density: 0.1 };
        assert!(validate_regions(&extent, &[a, c]).is_err());
        let d = DensityRegion { min: [6.0, 0.0], max: [10.0, 10.0], density: 0.1 };
        validate_regions(&extent, &[a, d]).unwrap();
    }

    #[test]
    fn occupancy_queries() {
        let w = World {
            extent: Vec3::new(20.0, 20.0, 2.0),
            trees: vec![TreeObstacle { x: 5.0, y: 5.0, radius: 0.3, height: 2.0 }],
            spawn_points: vec![],
            seed: 0,
            regions: None,
        };
        assert!(w.query_occupancy(&Vec3::new(5.0, 5.0, 1.0)));
        assert!(!w.query_occupancy(&Vec3::new(15.0, 15.0, 1.0)));
        // closed surface
        assert!(w.query_occupancy(&Vec3::new(5.3, 5.0, 1.0)));
        assert!(!w.query_occupancy(&Vec3::new(5.3 + 1e-9, 5.0, 1.0)));
        // outside the box
        assert!(w.query_occupancy(&Vec3::new(-0.1, 5.0, 1.0)));
        assert!(w.query_occupancy(&Vec3::new(10.0, 10.0, 2.5)));
    }

    #[test]
    fn json_round_trip() {
        let w = generate_forest(&params(1, [50.0, 50.0, 2.0], 0.05)).unwrap();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn missing_trees_key_is_named() {
        let text = r#"{"format":1,"seed":1,"extent":[10,10,2],"spawns":[]}"#;
        let err = World::from_json(text).unwrap_err().to_string();
        assert!(err.contains("missing field `trees`"), "{err}");
    }

    #[test]
    fn tree_outside_extent_fails_validation() {
        let text = r#"{"format":1,"seed":1,"extent":[10,10,2],
            "trees":[{"x":9.9,"y":5,"radius":0.3,"height":2}],"spawns":[]}"#;
        assert!(matches!(World::from_json(text), Err(Error::InvalidWorld(_))));
    }
}
