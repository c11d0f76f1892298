//! Deterministic multi-agent frontier exploration of forest-like worlds.
//!
//! The crate is organised as a pipeline, one module per stage:
//!
//! * [`world`]: ground-truth forests of vertical cylinders, seeded generation and JSON files.
//! * [`sensor`]: a forward-looking depth camera rendered by analytic ray casting.
//! * [`grid_map`]: the agent's ternary voxel map, scan integration and map merging.
//! * [`frontier`]: frontier detection, clustering, trail classification and viewpoints.
//! * [`planner`]: grid shortest paths, the Explorer and Collector cost functions, mode selection.
//! * [`motion`]: a kinematic path follower with speed and yaw-rate caps.
//! * [`coordination`]: range-limited peer exchange, map sync and the team cost.
//! * [`simulation`]: the mission loop, baselines and metrics.

pub mod coordination;
pub mod error;
pub mod frontier;
pub mod grid_map;
pub mod motion;
pub mod planner;
pub mod rng;
pub mod sensor;
pub mod simulation;
pub mod world;

pub use error::{Error, Result};

/// World-frame 3-vector in meters (or m/s for velocities).
pub type Vec3 = nalgebra::Vector3<f64>;

/// Wraps an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a % TAU;
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// Absolute wrapped difference between two angles, in [0, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}
