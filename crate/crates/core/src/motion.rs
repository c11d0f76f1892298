//! Kinematic path follower.
//!
//! The vehicle moves along a polyline of waypoints at the mode's speed limit
//! and slews its yaw toward the direction of travel, or toward the target yaw
//! once the path is used up. Velocity may change direction instantly; only
//! speed and yaw rate are capped.

use serde::{Deserialize, Serialize};

use crate::frontier::Viewpoint;
use crate::planner::{speed_limit, DynamicLimits, Mode};
use crate::world::World;
use crate::{angle_diff, normalize_angle, Vec3};

/// Yaw error below which a viewpoint counts as reached.
pub const ARRIVAL_YAW_TOL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub position: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub mode: Mode,
    pub target: Option<Viewpoint>,
    pub distance_travelled: f64,
    /// Remaining waypoints, nearest first.
    pub path: Vec<Vec3>,
}

impl AgentState {
    pub fn new(id: usize, position: Vec3, yaw: f64) -> Self {
        Self {
            id,
            position,
            yaw: normalize_angle(yaw),
            velocity: Vec3::zeros(),
            mode: Mode::Explorer,
            target: None,
            distance_travelled: 0.0,
            path: Vec::new(),
        }
    }

    /// Unit direction of motion, or the yaw heading when (nearly) at rest.
    pub fn heading(&self) -> Vec3 {
        let speed = self.velocity.norm();
        if speed < 1e-6 {
            Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
        } else {
            self.velocity / speed
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    pub fn remaining_path(&self) -> f64 {
        let mut p = self.position;
        let mut total = 0.0;
        for w in &self.path {
            total += (w - p).norm();
            p = *w;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub displacement: f64,
    pub yaw_change: f64,
    pub arrived: bool,
}

/// True when the path is used up, the vehicle is within `tolerance` of the
/// target position, and the yaw error is within [`ARRIVAL_YAW_TOL`].
pub fn arrived(state: &AgentState, tolerance: f64) -> bool {
    match &state.target {
        Some(t) => {
            state.path.is_empty()
                && (state.position - t.position).norm() <= tolerance + 1e-9
                && angle_diff(state.yaw, t.yaw) <= ARRIVAL_YAW_TOL
        }
        None => false,
    }
}

fn slew(yaw: f64, desired: f64, max_step: f64) -> f64 {
    let err = normalize_angle(desired - yaw);
    normalize_angle(yaw + err.clamp(-max_step, max_step))
}

/// Advances the vehicle by `dt`. `tolerance` is the arrival radius (one cell).
pub fn step(state: &mut AgentState, dt: f64, limits: &DynamicLimits, tolerance: f64) -> StepOutcome {
    let start = state.position;
    let mut budget = speed_limit(state.mode, limits) * dt;
    let mut pos = start;
    let mut consumed = 0;
    for w in &state.path {
        let seg = w - pos;
        let len = seg.norm();
        if len <= budget + 1e-9 {
            pos = *w;
            budget = (budget - len).max(0.0);
            consumed += 1;
        } else {
            pos += seg * (budget / len);
            break;
        }
    }
    state.path.drain(..consumed);
    let moved = pos - start;
    let displacement = moved.norm();
    state.position = pos;
    state.velocity = moved / dt;
    state.distance_travelled += displacement;

    let desired = if let Some(next) = state.path.first() {
        let d = next - pos;
        if d.x.hypot(d.y) > 1e-9 {
            d.y.atan2(d.x)
        } else {
            state.yaw
        }
    } else if let Some(t) = &state.target {
        t.yaw
    } else {
        state.yaw
    };
    let old = state.yaw;
    state.yaw = slew(old, desired, limits.yaw_rate_max * dt);
    StepOutcome {
        displacement,
        yaw_change: angle_diff(state.yaw, old),
        arrived: arrived(state, tolerance),
    }
}

/// True iff some tree comes closer than its radius plus `safety_radius` to
/// `position`, measured horizontally, with `position` within the trunk height.
pub fn check_collision(position: &Vec3, world: &World, safety_radius: f64) -> bool {
    world
        .trees_near(position, safety_radius)
        .any(|t| position.z >= 0.0 && position.z <= t.height && t.axis_distance(position) < t.radius + safety_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::world::TreeObstacle;
    use std::f64::consts::PI;

    fn limits() -> DynamicLimits {
        DynamicLimits { v_max: 1.5, yaw_rate_max: 0.9, collector_speed_factor: 2.0 }
    }

    fn agent_on_line(len: f64) -> AgentState {
        let mut a = AgentState::new(0, Vec3::new(0.0, 0.0, 1.0), 0.0);
        a.path = vec![Vec3::new(len, 0.0, 1.0)];
        a.target = Some(Viewpoint { position: Vec3::new(len, 0.0, 1.0), yaw: 0.0, coverage: 1 });
        a
    }

    #[test]
    fn straight_path_arrives_after_twenty_steps() {
        let mut a = agent_on_line(3.0);
        let mut steps = 0;
        loop {
            let out = step(&mut a, 0.1, &limits(), 0.1);
            steps += 1;
            assert!(out.displacement <= 0.15 + 1e-12);
            if steps < 20 {
                assert!((out.displacement - 0.15).abs() < 1e-12);
            }
            if out.arrived {
                break;
            }
            assert!(steps < 100);
        }
        // within one cell after 19 steps, but the path is only used up at 20
        assert_eq!(steps, 20);
        assert!((a.distance_travelled - 3.0).abs() < 1e-9);
    }

    #[test]
    fn collector_moves_at_double_speed() {
        let mut a = agent_on_line(3.0);
        a.mode = Mode::Collector;
        let out = step(&mut a, 0.1, &limits(), 0.1);
        assert!((out.displacement - 0.3).abs() < 1e-12);
    }

    #[test]
    fn yaw_alignment_takes_ceil_steps() {
        let mut a = AgentState::new(0, Vec3::new(0.0, 0.0, 1.0), 0.0);
        a.target = Some(Viewpoint { position: a.position, yaw: PI, coverage: 1 });
        let dt = 0.1;
        let want = (PI / (0.9 * dt)).ceil() as usize;
        let mut steps = 0;
        while !step(&mut a, dt, &limits(), 0.1).arrived {
            steps += 1;
            assert!(steps <= want);
        }
        steps += 1;
        // arrival is declared once the residual error drops below the tolerance
        let tol_steps = ((PI - ARRIVAL_YAW_TOL) / (0.9 * dt)).ceil() as usize;
        assert_eq!(steps, tol_steps);
        for _ in 0..want {
            step(&mut a, dt, &limits(), 0.1);
        }
        assert!(angle_diff(a.yaw, PI) < 1e-12);
    }

    #[test]
    fn yaw_rate_is_capped() {
        let mut a = AgentState::new(0, Vec3::new(0.0, 0.0, 1.0), 0.0);
        a.path = vec![Vec3::new(0.0, 0.2, 1.0), Vec3::new(-3.0, 0.2, 1.0)];
        for _ in 0..50 {
            let out = step(&mut a, 0.1, &limits(), 0.1);
            assert!(out.yaw_change <= 0.09 + 1e-12);
        }
    }

    fn follow(path: &[Vec3], dt: f64, t_end: f64) -> Vec<(f64, Vec3)> {
        let mut a = AgentState::new(0, path[0], 0.0);
        a.path = path[1..].to_vec();
        let mut out = vec![(0.0, a.position)];
        let n = (t_end / dt).round() as usize;
        for k in 1..=n {
            step(&mut a, dt, &limits(), 0.1);
            out.push((k as f64 * dt, a.position));
        }
        out
    }

    #[test]
    fn halving_dt_keeps_geometry() {
        let path = vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(2.0, 0.0, 1.0),
            Vec3::new(2.0, 3.0, 1.0),
            Vec3::new(5.0, 4.0, 1.0),
        ];
        let coarse = follow(&path, 0.1, 8.0);
        let fine = follow(&path, 0.05, 8.0);
        for (k, (t, p)) in coarse.iter().enumerate() {
            let (tf, q) = fine[2 * k];
            assert!((t - tf).abs() < 1e-9);
            assert!((p - q).norm() <= 0.1, "t={t}: {p:?} vs {q:?}");
        }
    }

    #[test]
    fn collision_cases() {
        let w = World {
            extent: Vec3::new(20.0, 20.0, 2.0),
            trees: vec![TreeObstacle { x: 10.0, y: 10.0, radius: 0.3, height: 2.0 }],
            spawn_points: vec![],
            seed: 0,
            regions: None,
        };
        assert!(!check_collision(&Vec3::new(2.0, 2.0, 1.0), &w, 0.3));
        assert!(check_collision(&Vec3::new(10.3, 10.0, 1.0), &w, 0.3));
        assert!(!check_collision(&Vec3::new(10.0, 10.0, 2.5), &w, 0.3));
    }

    #[test]
    fn collision_matches_brute_force() {
        let mut rng = SeededRng::new(17);
        let trees: Vec<TreeObstacle> = (0..40)
            .map(|_| TreeObstacle {
                x: rng.uniform(0.0, 20.0),
                y: rng.uniform(0.0, 20.0),
                radius: rng.uniform(0.1, 0.4),
                height: rng.uniform(0.5, 2.0),
            })
            .collect();
        let w = World { extent: Vec3::new(20.0, 20.0, 2.0), trees, spawn_points: vec![], seed: 0, regions: None };
        for _ in 0..5000 {
            let p = Vec3::new(rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0), rng.uniform(0.0, 2.0));
            let want = w.trees.iter().any(|t| {
                p.z <= t.height && ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt() < t.radius + 0.3
            });
            assert_eq!(check_collision(&p, &w, 0.3), want);
        }
    }
}
