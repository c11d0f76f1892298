//! Simulated forward-looking depth camera.
//!
//! Rays form a pinhole grid: ray `(i, j)` points along `(1, s_i tan(h/2), t_j tan(v/2))`
//! in the camera frame (x forward, y left, z up), with `s_i, t_j` evenly spaced
//! in `[-1, 1]`, then rotated by the pose yaw. Pitch and roll are fixed at zero.
//! Ranges come from closed-form ray/cylinder and ray/box intersections; the
//! world box itself is an occupied shell.

use serde::{Deserialize, Serialize};

use crate::world::{TreeObstacle, World};
use crate::{normalize_angle, Error, Result, Vec3};

pub const DEFAULT_MAX_RANGE: f64 = 4.5;
pub const DEFAULT_H_FOV_DEG: f64 = 87.0;
pub const DEFAULT_V_FOV_DEG: f64 = 58.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthCamera {
    pub max_range: f64,
    pub h_fov: f64,
    pub v_fov: f64,
    pub h_rays: usize,
    pub v_rays: usize,
}

/// Smallest odd ray count whose tan-space spacing keeps adjacent rays within
/// `atan(voxel / range)` of each other.
pub fn ray_count_for(fov: f64, max_range: f64, voxel: f64) -> usize {
    let spacing = voxel / max_range;
    let n = (2.0 * (fov / 2.0).tan() / spacing - 1e-9).ceil() as usize + 1;
    (n | 1).max(3)
}

impl DepthCamera {
    pub fn new(max_range: f64, h_fov: f64, v_fov: f64, h_rays: usize, v_rays: usize) -> Result<Self> {
        let cam = Self { max_range, h_fov, v_fov, h_rays, v_rays };
        cam.validate()?;
        Ok(cam)
    }

    /// Default camera with ray counts derived from the map resolution.
    pub fn for_resolution(voxel: f64) -> Self {
        let h_fov = DEFAULT_H_FOV_DEG.to_radians();
        let v_fov = DEFAULT_V_FOV_DEG.to_radians();
        Self {
            max_range: DEFAULT_MAX_RANGE,
            h_fov,
            v_fov,
            h_rays: ray_count_for(h_fov, DEFAULT_MAX_RANGE, voxel),
            v_rays: ray_count_for(v_fov, DEFAULT_MAX_RANGE, voxel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::InvalidParameter("camera max_range must be > 0".into()));
        }
        for (name, fov) in [("h_fov", self.h_fov), ("v_fov", self.v_fov)] {
            if !(fov > 0.0 && fov < PI) {
                return Err(Error::InvalidParameter(format!("camera {name} must lie in (0, pi)")));
            }
        }
        if self.h_rays < 2 || self.v_rays < 2 {
            return Err(Error::InvalidParameter("camera needs at least 2 rays per axis".into()));
        }
        Ok(())
    }

    /// Unit ray directions in the camera frame, row-major (`j * h_rays + i`).
    pub fn camera_directions(&self) -> Vec<Vec3> {
        let th = (self.h_fov / 2.0).tan();
        let tv = (self.v_fov / 2.0).tan();
        let lerp = |k: usize, n: usize| 2.0 * k as f64 / (n - 1) as f64 - 1.0;
        let mut dirs = Vec::with_capacity(self.h_rays * self.v_rays);
        for j in 0..self.v_rays {
            let up = tv * lerp(j, self.v_rays);
            for i in 0..self.h_rays {
                let left = th * lerp(i, self.h_rays);
                dirs.push(Vec3::new(1.0, left, up).normalize());
            }
        }
        dirs
    }

    /// True when `target` seen from `pose` lies inside the view frustum and range.
    pub fn sees(&self, pose: &Pose, target: &Vec3) -> bool {
        let d = target - pose.position;
        if d.norm() > self.max_range {
            return false;
        }
        let (s, c) = pose.yaw.sin_cos();
        let forward = d.x * c + d.y * s;
        if forward <= 0.0 {
            return false;
        }
        let lateral = -d.x * s + d.y * c;
        lateral.abs() <= forward * (self.h_fov / 2.0).tan() + 1e-12
            && d.z.abs() <= forward * (self.v_fov / 2.0).tan() + 1e-12
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64) -> Self {
        Self { position, yaw: normalize_angle(yaw) }
    }

    /// Rotates a camera-frame vector into the world frame.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRay {
    pub direction: Vec3,
    pub hit: bool,
    pub range: f64,
}

impl DepthRay {
    pub fn endpoint(&self, origin: &Vec3) -> Vec3 {
        origin + self.direction * self.range
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthScan {
    pub origin: Vec3,
    pub max_range: f64,
    pub rays: Vec<DepthRay>,
}

/// Entry distance of a ray into a closed vertical cylinder standing on z = 0.
/// Rays starting inside the trunk report nothing.
pub fn ray_cylinder(origin: &Vec3, dir: &Vec3, tree: &TreeObstacle) -> Option<f64> {
    let ox = origin.x - tree.x;
    let oy = origin.y - tree.y;
    let r2 = tree.radius * tree.radius;
    let inside_xy = ox * ox + oy * oy <= r2;
    if inside_xy && origin.z >= 0.0 && origin.z <= tree.height {
        return None;
    }
    let mut best: Option<f64> = None;
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-18 {
        let b = 2.0 * (ox * dir.x + oy * dir.y);
        let c = ox * ox + oy * oy - r2;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t0 = (-b - disc.sqrt()) / (2.0 * a);
            if t0 >= 0.0 {
                let z = origin.z + t0 * dir.z;
                if (0.0..=tree.height).contains(&z) {
                    best = Some(t0);
                }
            }
        }
    }
    // top cap, for rays coming down from above a short tree
    if origin.z > tree.height && dir.z < 0.0 {
        let t = (tree.height - origin.z) / dir.z;
        let x = ox + t * dir.x;
        let y = oy + t * dir.y;
        if x * x + y * y <= r2 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    best
}

/// Distance at which a ray starting inside `[0, extent]` leaves the box.
pub fn ray_box_exit(origin: &Vec3, dir: &Vec3, extent: &Vec3) -> f64 {
    let mut t = f64::INFINITY;
    for k in 0..3 {
        let d = dir[k];
        if d > 0.0 {
            t = t.min((extent[k] - origin[k]) / d);
        } else if d < 0.0 {
            t = t.min(-origin[k] / d);
        }
    }
    t.max(0.0)
}

/// Casts a single ray against the world, returning `(hit, range)`.
pub fn cast_ray<'a>(
    trees: impl IntoIterator<Item = &'a TreeObstacle>,
    extent: &Vec3,
    origin: &Vec3,
    dir: &Vec3,
    max_range: f64,
) -> (bool, f64) {
    let mut range = max_range;
    let mut hit = false;
    let exit = ray_box_exit(origin, dir, extent);
    if exit <= range {
        range = exit;
        hit = true;
    }
    for tree in trees {
        if let Some(t) = ray_cylinder(origin, dir, tree) {
            if t <= range {
                range = t;
                hit = true;
            }
        }
    }
    (hit, range)
}

pub fn render_depth_scan(world: &World, pose: &Pose, cam: &DepthCamera) -> DepthScan {
    let origin = pose.position;
    let near: Vec<&TreeObstacle> = world.trees_near(&origin, cam.max_range).collect();
    let rays = cam
        .camera_directions()
        .iter()
        .map(|d| {
            let direction = pose.rotate(d);
            let (hit, range) =
                cast_ray(near.iter().copied(), &world.extent, &origin, &direction, cam.max_range);
            DepthRay { direction, hit, range }
        })
        .collect();
    DepthScan { origin, max_range: cam.max_range, rays }
}
