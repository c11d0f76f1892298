//! Range-limited peer exchange, map synchronisation and the team cost.
//!
//! Agents that are within `comm_range` of each other exchange odometry, mode,
//! goal and map information at every sync step; there is no relaying. Each
//! agent's map carries an append-only journal of changed cells. Between two
//! agents that stayed connected since the previous sync, only journal entries
//! the peer has not seen are sent; after a gap (or on first contact) both maps
//! are merged in full.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grid_map::{CellState, VoxelGrid};
use crate::planner::Mode;
use crate::sensor::DepthScan;
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinationParams {
    pub comm_range: f64,
    pub k_a: f64,
    pub k_r: f64,
    pub d_0: f64,
    pub d_c: f64,
    pub sync_period: f64,
    /// Evaluate the attraction term at the candidate viewpoint rather than at
    /// the agent's own position.
    pub attraction_at_candidate: bool,
    /// Time windows `[start, end)` during which every link is forced down.
    pub blackouts: Vec<[f64; 2]>,
}

impl Default for CoordinationParams {
    fn default() -> Self {
        Self {
            comm_range: 50.0,
            k_a: 0.05,
            k_r: 1.0,
            d_0: 5.0,
            d_c: 2.0,
            sync_period: 1.0,
            attraction_at_candidate: true,
            blackouts: Vec::new(),
        }
    }
}

impl CoordinationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.comm_range > 0.0) {
            return Err(Error::InvalidConfig("coordination.comm_range must be > 0".into()));
        }
        if !(self.d_c < self.d_0) {
            return Err(Error::InvalidConfig("coordination.d_c must be < d_0".into()));
        }
        if self.k_a < 0.0 || self.k_r < 0.0 {
            return Err(Error::InvalidConfig("coordination.k_a and k_r must be >= 0".into()));
        }
        if !(self.sync_period > 0.0) {
            return Err(Error::InvalidConfig("coordination.sync_period must be > 0".into()));
        }
        Ok(())
    }

    pub fn blacked_out(&self, t: f64) -> bool {
        self.blackouts.iter().any(|w| t >= w[0] && t < w[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub id: usize,
    pub position: Vec3,
    pub mode: Mode,
    pub goal: Option<Vec3>,
    pub last_seen: f64,
    pub map_revision_seen: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeamContext {
    pub self_id: usize,
    /// Currently connected peers only.
    pub peers: Vec<PeerInfo>,
}

/// Pairs `(i, k)`, `i < k`, whose positions are within `comm_range`.
pub fn connectivity(positions: &[Vec3], comm_range: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..positions.len() {
        for k in i + 1..positions.len() {
            if (positions[i] - positions[k]).norm() <= comm_range {
                out.push((i, k));
            }
        }
    }
    out
}

/// 0 when an Explorer looks at a Collector peer, 1 otherwise.
pub fn indicator(mode_i: Mode, mode_k: Mode) -> f64 {
    if mode_i == Mode::Explorer && mode_k == Mode::Collector {
        0.0
    } else {
        1.0
    }
}

pub fn attraction_cost(eval_point: &Vec3, self_mode: Mode, peers: &[PeerInfo], k_a: f64) -> f64 {
    peers
        .iter()
        .map(|p| indicator(self_mode, p.mode) * 0.5 * k_a * (eval_point - p.position).norm())
        .sum()
}

/// Piecewise repulsion: a plateau below `d_c`, quadratic up to `d_0`, zero beyond.
pub fn repulsion_pair(d: f64, k_r: f64, d_0: f64, d_c: f64) -> f64 {
    if d <= d_c {
        k_r * (d_c - d_0).powi(2) * (d_c * d_0) / (d_0 - d_c)
    } else if d <= d_0 {
        k_r * (d - d_0).powi(2)
    } else {
        0.0
    }
}

/// Team term for a candidate viewpoint at `candidate`.
pub fn team_cost(candidate: &Vec3, self_position: &Vec3, self_mode: Mode, team: &TeamContext, params: &CoordinationParams) -> f64 {
    if team.peers.is_empty() {
        return 0.0;
    }
    let eval = if params.attraction_at_candidate { candidate } else { self_position };
    let mut cost = attraction_cost(eval, self_mode, &team.peers, params.k_a);
    for p in &team.peers {
        cost += repulsion_pair((self_position - p.position).norm(), params.k_r, params.d_0, params.d_c);
        if let Some(goal) = p.goal {
            cost += repulsion_pair((candidate - goal).norm(), params.k_r, params.d_0, params.d_c);
        }
    }
    cost
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Link {
    connected: bool,
    /// Length of the peer's journal already received.
    seen: usize,
}

/// An agent's map plus the bookkeeping needed to sync it.
#[derive(Clone, Debug)]
pub struct SharedMap {
    map: VoxelGrid,
    journal: Vec<u32>,
    links: BTreeMap<usize, Link>,
    sensed: Vec<bool>,
    sensed_cells: usize,
    discovered_cells: usize,
}

impl SharedMap {
    pub fn new(map: VoxelGrid) -> Self {
        let n = map.len();
        Self {
            map,
            journal: Vec::new(),
            links: BTreeMap::new(),
            sensed: vec![false; n],
            sensed_cells: 0,
            discovered_cells: 0,
        }
    }

    pub fn map(&self) -> &VoxelGrid {
        &self.map
    }

    /// Number of journal entries (the map revision peers track).
    pub fn revision(&self) -> usize {
        self.journal.len()
    }

    /// Integrates one of the agent's own scans; returns the changed cells.
    pub fn integrate_scan(&mut self, scan: &DepthScan) -> Vec<usize> {
        let known_before = self.map.coverage().known_cells;
        let sensed = &mut self.sensed;
        let mut fresh = 0;
        let changed = self.map.integrate_scan_visit(scan, |i| {
            if !sensed[i] {
                sensed[i] = true;
                fresh += 1;
            }
        });
        self.sensed_cells += fresh;
        self.discovered_cells += self.map.coverage().known_cells - known_before;
        self.journal.extend(changed.iter().map(|&i| i as u32));
        changed
    }

    /// True if the agent's own sensor ever observed this cell.
    pub fn sensed(&self, idx: usize) -> bool {
        self.sensed[idx]
    }

    /// Volume observed by the agent's own sensor.
    pub fn own_explored_volume(&self) -> f64 {
        self.sensed_cells as f64 * self.map.resolution().powi(3)
    }

    /// Volume the agent's own scans made known before any peer shared it.
    pub fn discovered_volume(&self) -> f64 {
        self.discovered_cells as f64 * self.map.resolution().powi(3)
    }

    fn apply(&mut self, cells: &[(u32, CellState)]) -> Vec<usize> {
        let changed = self.map.apply_cells(cells);
        self.journal.extend(changed.iter().map(|&i| i as u32));
        changed
    }

    fn merge_full(&mut self, other: &VoxelGrid) -> Vec<usize> {
        let changed = self.map.merge_from(other).expect("team maps share geometry");
        self.journal.extend(changed.iter().map(|&i| i as u32));
        changed
    }

    fn delta_since(&self, seen: usize) -> Vec<(u32, CellState)> {
        let mut idx: Vec<u32> = self.journal[seen..].to_vec();
        idx.sort_unstable();
        idx.dedup();
        idx.into_iter().map(|i| (i, self.map.state(i as usize))).collect()
    }

    fn link(&mut self, peer: usize) -> &mut Link {
        self.links.entry(peer).or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Odom,
    Mode,
    Goal,
    MapDelta,
    FullMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub t: f64,
    pub from: usize,
    pub to: usize,
    pub kind: MessageKind,
    pub payload: serde_json::Value,
}

/// What each agent tells its peers about itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Beacon {
    pub position: Vec3,
    pub mode: Mode,
    pub goal: Option<Vec3>,
}

#[derive(Clone, Debug, Default)]
pub struct ExchangeReport {
    /// Changed cells per agent, ascending.
    pub changed: Vec<Vec<usize>>,
    /// Connected peers per agent after the exchange.
    pub teams: Vec<TeamContext>,
    pub pairs: Vec<(usize, usize)>,
    pub messages: Vec<Message>,
}

/// One synchronous exchange round between all agents. Pairs are processed in
/// ascending `(i, k)` order.
pub fn exchange_and_sync(
    maps: &mut [SharedMap],
    beacons: &[Beacon],
    params: &CoordinationParams,
    now: f64,
    log_messages: bool,
) -> ExchangeReport {
    let n = maps.len();
    let positions: Vec<Vec3> = beacons.iter().map(|b| b.position).collect();
    let pairs = if params.blacked_out(now) { Vec::new() } else { connectivity(&positions, params.comm_range) };
    let mut report = ExchangeReport {
        changed: vec![Vec::new(); n],
        teams: (0..n).map(|i| TeamContext { self_id: i, peers: Vec::new() }).collect(),
        pairs: pairs.clone(),
        messages: Vec::new(),
    };
    let mut connected_now = vec![vec![false; n]; n];
    for &(i, k) in &pairs {
        connected_now[i][k] = true;
        connected_now[k][i] = true;
    }
    for (i, row) in connected_now.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if i != k && !c {
                maps[i].link(k).connected = false;
            }
        }
    }
    for &(i, k) in &pairs {
        let (lo, hi) = maps.split_at_mut(k);
        let (a, b) = (&mut lo[i], &mut hi[0]);
        let reconnect = !a.link(k).connected || !b.link(i).connected;
        if reconnect {
            let ca = a.merge_full(&b.map);
            let cb = b.merge_full(&a.map);
            if log_messages {
                for (from, to, cells) in [(k, i, ca.len()), (i, k, cb.len())] {
                    report.messages.push(Message {
                        t: now,
                        from,
                        to,
                        kind: MessageKind::FullMap,
                        payload: serde_json::json!({ "changed": cells }),
                    });
                }
            }
            report.changed[i].extend(ca);
            report.changed[k].extend(cb);
        } else {
            let to_b = a.delta_since(b.link(i).seen);
            let to_a = b.delta_since(a.link(k).seen);
            let cb = b.apply(&to_b);
            let ca = a.apply(&to_a);
            if log_messages {
                for (from, to, sent, rev) in [(i, k, to_b.len(), a.revision()), (k, i, to_a.len(), b.revision())] {
                    report.messages.push(Message {
                        t: now,
                        from,
                        to,
                        kind: MessageKind::MapDelta,
                        payload: serde_json::json!({ "cells": sent, "revision": rev }),
                    });
                }
            }
            report.changed[i].extend(ca);
            report.changed[k].extend(cb);
        }
        let (ra, rb) = (a.revision(), b.revision());
        *a.link(k) = Link { connected: true, seen: rb };
        *b.link(i) = Link { connected: true, seen: ra };
    }
    for &(i, k) in &pairs {
        for (me, other) in [(i, k), (k, i)] {
            let b = &beacons[other];
            report.teams[me].peers.push(PeerInfo {
                id: other,
                position: b.position,
                mode: b.mode,
                goal: b.goal,
                last_seen: now,
                map_revision_seen: maps[me].links[&other].seen,
            });
            if log_messages {
                let v = |x: &Vec3| [x.x, x.y, x.z];
                for (kind, payload) in [
                    (MessageKind::Odom, serde_json::json!({ "position": v(&b.position) })),
                    (MessageKind::Mode, serde_json::json!({ "mode": b.mode })),
                    (MessageKind::Goal, serde_json::json!({ "goal": b.goal.as_ref().map(v) })),
                ] {
                    report.messages.push(Message { t: now, from: other, to: me, kind, payload });
                }
            }
        }
    }
    for team in &mut report.teams {
        team.peers.sort_by_key(|p| p.id);
    }
    for c in &mut report.changed {
        c.sort_unstable();
        c.dedup();
    }
    report
}
