//! Risk field around the vehicle under test and element allocation.
//!
//! Each entity contributes an anisotropic Gaussian kernel centred on it,
//! stretched along its heading. Amplitude is `1 + speed/10`; the
//! longitudinal spread is `length/2 + 1 + 0.5·speed` and the lateral spread
//! `width/2 + 0.5`. The field is sampled on a grid covering the ego's path
//! from 20 m behind to 80 m ahead, 5 m either side of the path centreline.
//! An entity's contribution is its kernel mass inside that corridor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::world::map::ScenarioMap;
use crate::world::{EntityKind, EntityState, WorldState};

pub const CORRIDOR_BEHIND: f64 = 20.0;
pub const CORRIDOR_AHEAD: f64 = 80.0;
pub const CORRIDOR_HALF_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCell {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskField {
    pub resolution: f64,
    pub cells: Vec<RiskCell>,
    pub contributions: BTreeMap<String, f64>,
}

impl RiskField {
    /// Field mass: the sum of cell values times the cell area.
    pub fn mass(&self) -> f64 {
        self.cells.iter().map(|c| c.value).sum::<f64>() * self.resolution * self.resolution
    }
}

/// Kernel of `e` evaluated at `(x, y)`.
pub fn kernel(e: &EntityState, x: f64, y: f64) -> f64 {
    let amp = 1.0 + e.speed / 10.0;
    let s_long = e.length / 2.0 + 1.0 + 0.5 * e.speed;
    let s_lat = e.width / 2.0 + 0.5;
    let (c, s) = (e.pose.heading.cos(), e.pose.heading.sin());
    let (dx, dy) = (x - e.pose.x, y - e.pose.y);
    let lon = dx * c + dy * s;
    let lat = -dx * s + dy * c;
    amp * (-0.5 * ((lon / s_long).powi(2) + (lat / s_lat).powi(2))).exp()
}

/// Centreline poses `(x, y, heading)` along the ego's path at `stations`
/// relative to the ego.
fn path_poses(ego: &EntityState, map: &ScenarioMap, rel: &[f64]) -> Vec<(f64, f64, f64)> {
    let lanes: Vec<&str> = ego.lane.iter().map(String::as_str).chain(ego.route.iter().map(String::as_str)).collect();
    rel.iter()
        .map(|&r| {
            let Some(first) = lanes.first().and_then(|l| map.lane(l)) else {
                let h = ego.pose.heading;
                return (ego.pose.x + r * h.cos(), ego.pose.y + r * h.sin(), h);
            };
            let mut s = ego.station + r;
            if s < 0.0 {
                return first.pose_at(s);
            }
            let mut last = first;
            for id in &lanes {
                let Some(l) = map.lane(id) else { break };
                last = l;
                if s <= l.length() {
                    return l.pose_at(s);
                }
                s -= l.length();
            }
            last.pose_at(last.length() + s)
        })
        .collect()
}

/// Risk field over the ego's route corridor.
pub fn risk_field(world: &WorldState, map: &ScenarioMap, ego_id: &str, grid_res: f64) -> RiskField {
    let res = if grid_res > 0.0 { grid_res } else { 1.0 };
    let Some(ego) = world.entities.get(ego_id) else {
        return RiskField {
            resolution: res,
            cells: Vec::new(),
            contributions: BTreeMap::new(),
        };
    };
    let n_long = ((CORRIDOR_BEHIND + CORRIDOR_AHEAD) / res).round() as usize;
    let n_lat = ((2.0 * CORRIDOR_HALF_WIDTH) / res).round() as usize;
    let rel: Vec<f64> = (0..n_long).map(|i| -CORRIDOR_BEHIND + (i as f64 + 0.5) * res).collect();
    let mut cells = Vec::with_capacity(n_long * n_lat);
    for (x, y, h) in path_poses(ego, map, &rel) {
        for j in 0..n_lat {
            let off = -CORRIDOR_HALF_WIDTH + (j as f64 + 0.5) * res;
            cells.push(RiskCell {
                x: x - off * h.sin(),
                y: y + off * h.cos(),
                value: 0.0,
            });
        }
    }
    let area = res * res;
    let mut contributions = BTreeMap::new();
    for e in world.entities.values() {
        if e.id == ego.id || e.kind == EntityKind::Rsu || e.finished {
            continue;
        }
        let mut mass = 0.0;
        for c in cells.iter_mut() {
            let k = kernel(e, c.x, c.y);
            c.value += k;
            mass += k;
        }
        contributions.insert(e.id.clone(), mass * area);
    }
    RiskField {
        resolution: res,
        cells,
        contributions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Physical,
    Virtual,
}

/// The `budget` entities with the largest contribution become physical,
/// ties broken by id; everything else is virtual. Entities without a
/// contribution count as zero.
pub fn allocate_elements<'a>(
    roster: impl IntoIterator<Item = &'a str>,
    contributions: &BTreeMap<String, f64>,
    budget: usize,
) -> BTreeMap<String, Allocation> {
    let mut ids: Vec<&str> = roster.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    let value = |id: &str| contributions.get(id).copied().unwrap_or(0.0);
    ids.sort_by(|a, b| value(b).total_cmp(&value(a)).then(a.cmp(b)));
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let a = if i < budget { Allocation::Physical } else { Allocation::Virtual };
            (id.to_string(), a)
        })
        .collect()
}
