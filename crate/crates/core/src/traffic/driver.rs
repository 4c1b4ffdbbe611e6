//! Baseline driver: IDM longitudinal control against the nearest constraint
//! ahead (vehicle, red signal, or a conflict point to yield at) and MOBIL
//! lane changes on free lanes.
//!
//! Conflicts are handled by projecting vehicles on the other lane onto the
//! ego path: at a merge, whoever is closer to the merge point becomes a
//! virtual leader; at a crossing, the vehicle without priority stops short
//! of the conflict area until the other has cleared it.

use serde::{Deserialize, Serialize};

use super::idm::{idm_accel, IdmParams};
use super::mobil::{mobil_decide, LaneDecision, LaneGaps, MobilInput, MobilParams, Neighbor};
use crate::cooperation::spat::Phase;
use crate::world::map::{ConflictKind, ScenarioMap};
use crate::world::{Control, EntityState, LaneIntent, WorldState};

/// How far ahead the driver looks for constraints (m).
pub const LOOKAHEAD: f64 = 150.0;
/// Other vehicles farther than this from a conflict point are ignored (m).
const CONFLICT_APPROACH: f64 = 80.0;
/// Priority traffic arriving later than this does not force a stop (s).
const YIELD_WINDOW: f64 = 8.0;
/// Stand-off before the conflict area when yielding (m).
const STOP_MARGIN: f64 = 1.0;
/// Smallest gap handed to IDM when a constraint already overlaps.
const MIN_GAP: f64 = 0.1;
/// Vehicles reconsider lane changes once every this many ticks.
const MOBIL_PERIOD: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverOptions {
    /// Yield at every crossing regardless of priority (cautious human).
    pub yield_all: bool,
    /// Drive through conflict points and signals without yielding.
    pub ignore_conflicts: bool,
    /// Multiplier on the desired speed.
    pub speed_factor: f64,
    pub lane_changes: bool,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            yield_all: false,
            ignore_conflicts: false,
            speed_factor: 1.0,
            lane_changes: true,
        }
    }
}

/// One lane of the ego path and the path coordinate of its start.
struct PathLane<'a> {
    lane: &'a str,
    start: f64,
}

fn ego_path<'a>(ego: &'a EntityState, map: &ScenarioMap) -> Vec<PathLane<'a>> {
    let Some(lane) = ego.lane.as_deref() else { return Vec::new() };
    let mut out = vec![PathLane {
        lane,
        start: -ego.station,
    }];
    let mut next_start = map.lane(lane).map_or(0.0, |l| l.length()) - ego.station;
    for r in &ego.route {
        if next_start > LOOKAHEAD {
            break;
        }
        out.push(PathLane {
            lane: r,
            start: next_start,
        });
        next_start += map.lane(r).map_or(0.0, |l| l.length());
    }
    out
}

fn path_pos(path: &[PathLane], lane: &str, station: f64) -> Option<f64> {
    path.iter().find(|p| p.lane == lane).map(|p| p.start + station)
}

/// Time to cover `d` from speed `v` accelerating at `a`.
pub fn arrival_time(d: f64, v: f64, a: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    (-v + (v * v + 2.0 * a * d).sqrt()) / a
}

/// Distance of `e` to `station` on `lane`, following its route one lane
/// ahead.
fn distance_to(e: &EntityState, map: &ScenarioMap, lane: &str, station: f64) -> Option<f64> {
    let cur = e.lane.as_deref()?;
    if cur == lane {
        return Some(station - e.station);
    }
    if e.route.first().map(String::as_str) == Some(lane) {
        let len = map.lane(cur)?.length();
        return Some(len - e.station + station);
    }
    None
}

fn desired_params(ego: &EntityState, map: &ScenarioMap, p: &IdmParams, opts: &DriverOptions) -> IdmParams {
    let limit = ego
        .lane
        .as_deref()
        .and_then(|l| map.lane(l))
        .map_or(p.v0, |l| l.speed_limit);
    IdmParams {
        v0: (p.v0.min(limit) * opts.speed_factor).max(0.1),
        ..*p
    }
}

/// Leader gap and speed among vehicles ahead on the path, including
/// vehicles on other lanes that laterally overlap the ego lane.
fn vehicle_leader(
    world: &WorldState,
    map: &ScenarioMap,
    ego: &EntityState,
    path: &[PathLane],
    visible: &dyn Fn(&EntityState) -> bool,
) -> Option<(f64, f64)> {
    let ego_lane = ego.lane.as_deref().and_then(|l| map.lane(l))?;
    let mut best: Option<(f64, f64)> = None;
    for o in world.entities.values() {
        if o.id == ego.id || o.finished || !visible(o) || o.kind == crate::world::EntityKind::Rsu {
            continue;
        }
        let on_path = o.lane.as_deref().and_then(|l| path_pos(path, l, o.station));
        let pos = match on_path {
            Some(p) => Some(p),
            None => {
                if o.pose.distance(&ego.pose) > 100.0 {
                    None
                } else {
                    let (st, lat) = ego_lane.project(o.pose.x, o.pose.y);
                    let inside = st > 0.0 && st < ego_lane.length();
                    (inside && (lat - ego.lateral_offset).abs() < (ego.width + o.width) / 2.0 + 0.3)
                        .then_some(st - ego.station)
                }
            }
        };
        let Some(p) = pos else { continue };
        if p <= 0.0 || p > LOOKAHEAD {
            continue;
        }
        let gap = (p - (ego.length + o.length) / 2.0).max(MIN_GAP);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, o.speed));
        }
    }
    best
}

/// Virtual stopped leaders: red or unavoidable-yellow stop lines.
fn signal_stops(world: &WorldState, map: &ScenarioMap, ego: &EntityState, path: &[PathLane], b_comf: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for plan in map.signals.iter() {
        let Some(spat) = world.signal_state.get(&plan.id) else { continue };
        for head in &plan.heads {
            let Some(p) = path_pos(path, &head.lane, head.station) else { continue };
            let gap = p - ego.length / 2.0;
            if gap <= 0.0 || gap > LOOKAHEAD {
                continue;
            }
            let stop = match spat.phase(&head.approach) {
                Some(Phase::Red) => true,
                Some(Phase::Yellow) => gap >= ego.speed * ego.speed / (2.0 * b_comf),
                _ => false,
            };
            if stop {
                out.push(gap.max(MIN_GAP));
            }
        }
    }
    out
}

/// Virtual leaders from conflict points: (gap, leader speed).
fn conflict_constraints(
    world: &WorldState,
    map: &ScenarioMap,
    ego: &EntityState,
    path: &[PathLane],
    p: &IdmParams,
    opts: &DriverOptions,
    visible: &dyn Fn(&EntityState) -> bool,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for pl in path {
        for cp in map.conflicts_on(pl.lane) {
            let my_station = cp.station_on(pl.lane).unwrap();
            let p_c = pl.start + my_station;
            if p_c < -(cp.radius + ego.length / 2.0) || p_c > CONFLICT_APPROACH {
                continue;
            }
            let other_lane = cp.other_lane(pl.lane).unwrap();
            let other_station = cp.station_on(other_lane).unwrap();
            for o in world.entities.values() {
                if o.id == ego.id || o.finished || !visible(o) {
                    continue;
                }
                // A vehicle sharing the ego's path is handled as a leader.
                if o.lane.as_deref().is_some_and(|l| path_pos(path, l, 0.0).is_some()) {
                    continue;
                }
                let Some(d_o) = distance_to(o, map, other_lane, other_station) else { continue };
                if d_o < -(cp.radius + o.length / 2.0) || d_o > CONFLICT_APPROACH {
                    continue;
                }
                match cp.kind {
                    ConflictKind::Merge => {
                        let ahead = d_o < p_c || (d_o == p_c && o.id < ego.id);
                        if ahead {
                            let gap = (p_c - d_o - (ego.length + o.length) / 2.0).max(MIN_GAP);
                            out.push((gap, o.speed));
                        }
                    }
                    ConflictKind::Crossing => {
                        let stop_line = p_c - cp.radius - STOP_MARGIN - ego.length / 2.0;
                        if stop_line <= 0.0 {
                            // Already committed to the crossing.
                            continue;
                        }
                        let t_o = arrival_time(d_o, o.speed, p.a_max);
                        if t_o > YIELD_WINDOW {
                            continue;
                        }
                        let other_first = if opts.yield_all {
                            true
                        } else {
                            match cp.priority.as_deref() {
                                Some(l) if l == other_lane => true,
                                Some(_) => false,
                                None => {
                                    let t_e = arrival_time(p_c, ego.speed, p.a_max);
                                    t_o < t_e || (t_o == t_e && o.id < ego.id)
                                }
                            }
                        };
                        if other_first {
                            out.push((stop_line.max(MIN_GAP), 0.0));
                        }
                    }
                }
            }
        }
    }
    out
}

fn lane_gaps(
    world: &WorldState,
    map: &ScenarioMap,
    ego: &EntityState,
    lane_id: &str,
    visible: &dyn Fn(&EntityState) -> bool,
) -> Option<LaneGaps> {
    let lane = map.lane(lane_id)?;
    let (st, _) = lane.project(ego.pose.x, ego.pose.y);
    let mut gaps = LaneGaps::default();
    for o in world.entities.values() {
        if o.id == ego.id || o.finished || !visible(o) || o.lane.as_deref() != Some(lane_id) {
            continue;
        }
        let d = o.station - st;
        let gap = d.abs() - (ego.length + o.length) / 2.0;
        if gap <= 0.0 {
            // Adjacent slot is occupied.
            return None;
        }
        let slot = if d > 0.0 { &mut gaps.leader } else { &mut gaps.follower };
        if slot.is_none_or(|n| gap < n.gap) {
            *slot = Some(Neighbor { gap, speed: o.speed });
        }
    }
    Some(gaps)
}

/// What the baseline driver perceives ahead of `ego_id`, as handed to
/// algorithms under test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Perception {
    /// Gap to and speed of the nearest vehicle ahead.
    pub leader: Option<(f64, f64)>,
    /// Gap to a stop line that must be respected.
    pub stop_gap: Option<f64>,
    /// Virtual leaders from conflict points with right of way elsewhere.
    pub yield_to: Vec<(f64, f64)>,
    pub speed_limit: f64,
}

pub fn perceive(
    world: &WorldState,
    map: &ScenarioMap,
    ego_id: &str,
    params: &IdmParams,
    visible: &dyn Fn(&EntityState) -> bool,
) -> Perception {
    let Some(ego) = world.entities.get(ego_id) else {
        return Perception::default();
    };
    let speed_limit = ego.lane.as_deref().and_then(|l| map.lane(l)).map_or(params.v0, |l| l.speed_limit);
    if ego.lane.is_none() {
        return Perception {
            speed_limit,
            ..Perception::default()
        };
    }
    let path = ego_path(ego, map);
    Perception {
        leader: vehicle_leader(world, map, ego, &path, visible),
        stop_gap: signal_stops(world, map, ego, &path, params.b_comf)
            .into_iter()
            .reduce(f64::min),
        yield_to: conflict_constraints(world, map, ego, &path, params, &DriverOptions::default(), visible),
        speed_limit,
    }
}

fn id_phase(id: &str) -> u64 {
    id.bytes().map(u64::from).sum::<u64>() % MOBIL_PERIOD
}

/// Control for `ego_id` from the baseline driver. `visible` selects the
/// entities the driver reacts to.
pub fn baseline_control(
    world: &WorldState,
    map: &ScenarioMap,
    ego_id: &str,
    params: &IdmParams,
    mobil: &MobilParams,
    opts: &DriverOptions,
    visible: &dyn Fn(&EntityState) -> bool,
) -> Control {
    let Some(ego) = world.entities.get(ego_id) else {
        return Control::default();
    };
    if ego.lane.is_none() {
        return Control::accel(ego.accel);
    }
    let p = desired_params(ego, map, params, opts);
    let path = ego_path(ego, map);
    let v = ego.speed;

    let leader = vehicle_leader(world, map, ego, &path, visible);
    let mut accel = match leader {
        Some((gap, vl)) => idm_accel(gap, v, vl, &p).unwrap_or(-p.b_hard),
        None => idm_accel(f64::INFINITY, v, v, &p).unwrap_or(0.0),
    };
    if !opts.ignore_conflicts {
        for gap in signal_stops(world, map, ego, &path, p.b_comf) {
            accel = accel.min(idm_accel(gap, v, 0.0, &p).unwrap_or(-p.b_hard));
        }
        for (gap, vl) in conflict_constraints(world, map, ego, &path, &p, opts, visible) {
            accel = accel.min(idm_accel(gap, v, vl, &p).unwrap_or(-p.b_hard));
        }
    }

    let mut intent = LaneIntent::Keep;
    let may_change = opts.lane_changes
        && ego.route.is_empty()
        && ego.lane_change.is_none()
        && ego.lateral_target == 0.0
        && (world.tick + id_phase(&ego.id)) % MOBIL_PERIOD == 0;
    if may_change {
        let lane = map.lane(ego.lane.as_deref().unwrap()).unwrap();
        let side = |l: &Option<String>| l.as_deref().and_then(|id| lane_gaps(world, map, ego, id, visible));
        let current = LaneGaps {
            leader: leader.map(|(gap, speed)| Neighbor { gap, speed }),
            follower: lane_gaps(world, map, ego, &lane.id, visible).and_then(|g| g.follower),
        };
        let input = MobilInput {
            speed: v,
            length: ego.length,
            current,
            left: side(&lane.left),
            right: side(&lane.right),
            ego: p,
            others: *params,
        };
        intent = match mobil_decide(&input, mobil) {
            LaneDecision::Keep => LaneIntent::Keep,
            LaneDecision::ChangeLeft => LaneIntent::Left,
            LaneDecision::ChangeRight => LaneIntent::Right,
        };
    }
    Control {
        accel,
        intent,
        lateral: None,
    }
}
