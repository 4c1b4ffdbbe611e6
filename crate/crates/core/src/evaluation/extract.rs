//! Raw metric extractors over a run log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversary::min_ttc;
use crate::cooperation::spat::Phase;
use crate::harness::runlog::{LogEvent, RunLog};
use crate::world::map::{ConflictPoint, ScenarioMap};
use crate::world::EntityState;

pub const METRIC_NAMES: [&str; 12] = [
    "min_ttc",
    "min_pet",
    "collision",
    "task_time_ratio",
    "avg_speed_ratio",
    "max_jerk",
    "max_decel",
    "speeding_share",
    "red_light_entries",
    "lane_violation_share",
    "induced_decel",
    "yield_reciprocity",
];

/// TTC look-ahead; a run where nothing closes in reports this value.
const TTC_HORIZON: f64 = 10.0;
const TTC_DCOL: f64 = 2.0;
/// Followers farther back than this are not affected by the vehicle (m).
const FOLLOWER_RANGE: f64 = 50.0;
/// Cap on the task time ratio of a vehicle that barely moved.
const MAX_TIME_RATIO: f64 = 10.0;

/// One vehicle's first stay inside a conflict area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub vehicle: String,
    pub lane: String,
    pub entry: f64,
    /// None if the vehicle was still inside when the log ended.
    pub exit: Option<f64>,
}

fn occupies(e: &EntityState, cp: &ConflictPoint) -> Option<String> {
    let lane = e.lane.as_deref()?;
    let s = cp.station_on(lane)?;
    ((e.station - s).abs() <= cp.radius + e.length / 2.0 && !e.finished).then(|| lane.to_string())
}

/// First passage of every vehicle through each conflict area, keyed by
/// conflict id. Exit is the first tick after entry at which the vehicle is
/// outside again.
pub fn conflict_passages(log: &RunLog) -> BTreeMap<String, Vec<Passage>> {
    let map = &log.header.map;
    let mut out = BTreeMap::new();
    for cp in &map.conflict_points {
        let mut open: BTreeMap<String, Passage> = BTreeMap::new();
        let mut done: BTreeMap<String, Passage> = BTreeMap::new();
        for t in &log.ticks {
            for e in t.entities.values() {
                if done.contains_key(&e.id) {
                    continue;
                }
                match (occupies(e, cp), open.contains_key(&e.id)) {
                    (Some(lane), false) => {
                        open.insert(
                            e.id.clone(),
                            Passage {
                                vehicle: e.id.clone(),
                                lane,
                                entry: t.time,
                                exit: None,
                            },
                        );
                    }
                    (None, true) => {
                        let mut p = open.remove(&e.id).unwrap();
                        p.exit = Some(t.time);
                        done.insert(e.id.clone(), p);
                    }
                    _ => {}
                }
            }
            // Despawned vehicles left the area.
            let gone: Vec<String> = open.keys().filter(|id| !t.entities.contains_key(*id)).cloned().collect();
            for id in gone {
                let mut p = open.remove(&id).unwrap();
                p.exit = Some(t.time);
                done.insert(id, p);
            }
        }
        done.extend(open);
        let mut v: Vec<Passage> = done.into_values().collect();
        v.sort_by(|a, b| a.entry.total_cmp(&b.entry).then(a.vehicle.cmp(&b.vehicle)));
        out.insert(cp.id.clone(), v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PetResult {
    pub pet: f64,
    /// Both vehicles were inside the area at once.
    pub proximity: bool,
    /// True if `a` entered first.
    pub a_first: bool,
}

fn pet_of(a: &Passage, b: &Passage) -> PetResult {
    let a_first = (a.entry, &a.vehicle) <= (b.entry, &b.vehicle);
    let (first, second) = if a_first { (a, b) } else { (b, a) };
    match first.exit {
        Some(x) if second.entry >= x => PetResult {
            pet: second.entry - x,
            proximity: false,
            a_first,
        },
        _ => PetResult {
            pet: 0.0,
            proximity: true,
            a_first,
        },
    }
}

/// Post-encroachment time between `a` and `b` at conflict `conflict`: the
/// time from the first vehicle leaving the area to the second entering.
/// None unless both traverse it from different lanes.
pub fn pet(log: &RunLog, conflict: &str, a: &str, b: &str) -> Option<PetResult> {
    let passages = conflict_passages(log);
    let ps = passages.get(conflict)?;
    let pa = ps.iter().find(|p| p.vehicle == a)?;
    let pb = ps.iter().find(|p| p.vehicle == b)?;
    (pa.lane != pb.lane).then(|| pet_of(pa, pb))
}

fn limit(map: &ScenarioMap, e: &EntityState) -> Option<f64> {
    e.lane.as_deref().and_then(|l| map.lane(l)).map(|l| l.speed_limit)
}

/// Raw values of every registered metric for `vehicle`, plus flags.
pub fn extract(log: &RunLog, vehicle: &str) -> (BTreeMap<String, Option<f64>>, Vec<String>) {
    let map = &log.header.map;
    let dt = log.header.dt;
    let mut flags = Vec::new();
    let mut raw: BTreeMap<String, Option<f64>> = BTreeMap::new();
    let states: Vec<(f64, &EntityState)> = log
        .ticks
        .iter()
        .filter_map(|t| t.entities.get(vehicle).map(|e| (t.time, e)))
        .filter(|(_, e)| !e.finished)
        .collect();

    // Safety.
    let ttc = log
        .ticks
        .iter()
        .filter_map(|t| t.entities.get(vehicle).filter(|e| !e.finished).map(|e| min_ttc(&t.entities, e, TTC_HORIZON, TTC_DCOL)))
        .map(|m| m.unwrap_or(TTC_HORIZON))
        .reduce(f64::min);
    raw.insert("min_ttc".into(), ttc);

    let mut min_pet: Option<f64> = None;
    let (mut given, mut taken) = (0i64, 0i64);
    for (cid, ps) in conflict_passages(log) {
        let Some(me) = ps.iter().find(|p| p.vehicle == vehicle) else { continue };
        for other in ps.iter().filter(|p| p.vehicle != vehicle && p.lane != me.lane) {
            let r = pet_of(me, other);
            if r.proximity {
                flags.push(format!("pet_proximity:{cid}:{}", other.vehicle));
            }
            min_pet = Some(min_pet.map_or(r.pet, |m| m.min(r.pet)));
            if r.a_first {
                taken += 1;
            } else {
                given += 1;
            }
        }
    }
    raw.insert("min_pet".into(), min_pet);
    let collided = log.events.iter().any(|e| matches!(&e.event, LogEvent::Collision { a, b } if a == vehicle || b == vehicle));
    raw.insert("collision".into(), Some(if collided { 1.0 } else { 0.0 }));

    // Efficiency.
    raw.insert("task_time_ratio".into(), task_time_ratio(log, vehicle));
    let ratios: Vec<f64> = states.iter().filter_map(|(_, e)| limit(map, e).map(|l| e.speed / l)).collect();
    raw.insert("avg_speed_ratio".into(), (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64));

    // Comfort.
    let jerk = states.windows(2).map(|w| ((w[1].1.accel - w[0].1.accel) / dt).abs()).fold(0.0, f64::max);
    raw.insert("max_jerk".into(), (!states.is_empty()).then_some(jerk));
    let decel = states.iter().map(|(_, e)| -e.accel).fold(0.0, f64::max);
    raw.insert("max_decel".into(), (!states.is_empty()).then_some(decel));

    // Compliance.
    let on_lane: Vec<&EntityState> = states.iter().map(|(_, e)| *e).filter(|e| e.lane.is_some()).collect();
    let share = |pred: &dyn Fn(&EntityState) -> bool| {
        (!on_lane.is_empty()).then(|| on_lane.iter().filter(|e| pred(e)).count() as f64 / on_lane.len() as f64)
    };
    raw.insert("speeding_share".into(), share(&|e| limit(map, e).is_some_and(|l| e.speed > l + 1e-9)));
    raw.insert(
        "lane_violation_share".into(),
        share(&|e| {
            let w = e.lane.as_deref().and_then(|l| map.lane(l)).map_or(f64::INFINITY, |l| l.width);
            e.lane_change.is_none() && e.lateral_offset.abs() > ((w - e.width) / 2.0).max(0.0) + 1e-9
        }),
    );
    raw.insert("red_light_entries".into(), Some(red_light_entries(log, vehicle) as f64));

    // Coordination.
    let mut induced: f64 = 0.0;
    for t in &log.ticks {
        let Some(me) = t.entities.get(vehicle).filter(|e| !e.finished) else { continue };
        let follower = t
            .entities
            .values()
            .filter(|o| o.id != me.id && o.kind.is_vehicle() && !o.finished && o.lane.is_some() && o.lane == me.lane)
            .filter(|o| o.station < me.station && me.station - o.station <= FOLLOWER_RANGE)
            .max_by(|a, b| a.station.total_cmp(&b.station));
        if let Some(f) = follower {
            induced = induced.max(-f.accel);
        }
    }
    raw.insert("induced_decel".into(), (!states.is_empty()).then_some(induced));
    raw.insert("yield_reciprocity".into(), (given + taken > 0).then(|| (given - taken).min(0) as f64));

    (raw, flags)
}

/// Actual over ideal travel time along the vehicle's initial lane and
/// route, ideal meaning every lane driven at its limit. An unfinished run
/// is judged on the distance it covered.
fn task_time_ratio(log: &RunLog, vehicle: &str) -> Option<f64> {
    let map = &log.header.map;
    let (t0, first) = log.ticks.iter().find_map(|t| t.entities.get(vehicle).map(|e| (t.time, e)))?;
    let lane0 = first.lane.as_deref()?;
    let lanes: Vec<&str> = std::iter::once(lane0).chain(first.route.iter().map(String::as_str)).collect();
    // (lane, path offset of station 0, ideal seconds to reach station 0)
    let mut segs = Vec::new();
    let (mut off, mut ideal) = (-first.station, -first.station / map.lane(lane0)?.speed_limit);
    for id in &lanes {
        let l = map.lane(id)?;
        segs.push((*id, off, ideal, l.speed_limit, l.length()));
        off += l.length();
        ideal += l.length() / l.speed_limit;
    }
    let done = log
        .events
        .iter()
        .find(|e| matches!(&e.event, LogEvent::RouteComplete { vehicle: v } if v == vehicle));
    if let Some(d) = done {
        let actual = (d.tick + 1) as f64 * log.header.dt - t0;
        return (ideal > 0.0).then(|| (actual / ideal).min(MAX_TIME_RATIO));
    }
    let (t1, last) = log.ticks.iter().rev().find_map(|t| t.entities.get(vehicle).map(|e| (t.time, e)))?;
    let (_, _, base, lim, len) = segs.iter().find(|s| Some(s.0) == last.lane.as_deref())?;
    let covered = base + last.station.min(*len) / lim;
    let elapsed = t1 - t0;
    if covered <= 1e-9 {
        return Some(MAX_TIME_RATIO);
    }
    Some((elapsed / covered).clamp(0.0, MAX_TIME_RATIO))
}

/// Times the vehicle crossed a stop line while its approach showed red.
fn red_light_entries(log: &RunLog, vehicle: &str) -> usize {
    let map = &log.header.map;
    let mut n = 0;
    for w in log.ticks.windows(2) {
        let (Some(a), Some(b)) = (w[0].entities.get(vehicle), w[1].entities.get(vehicle)) else { continue };
        let Some(lane) = a.lane.as_deref() else { continue };
        for plan in &map.signals {
            for h in plan.heads.iter().filter(|h| h.lane == lane) {
                let crossed = a.station < h.station
                    && match b.lane.as_deref() {
                        Some(l) if l == lane => b.station >= h.station,
                        other => b.finished || other == a.route.first().map(String::as_str),
                    };
                let red = w[0].signals.get(&plan.id).and_then(|p| p.get(&h.approach)) == Some(&Phase::Red);
                if crossed && red {
                    n += 1;
                }
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(v: &str, lane: &str, entry: f64, exit: Option<f64>) -> Passage {
        Passage {
            vehicle: v.into(),
            lane: lane.into(),
            entry,
            exit,
        }
    }

    #[test]
    fn pet_definition() {
        let a = passage("a", "x", 8.0, Some(10.0));
        let b = passage("b", "y", 11.2, Some(12.0));
        let r = pet_of(&a, &b);
        assert!((r.pet - 1.2).abs() < 1e-12 && !r.proximity && r.a_first);
        assert_eq!(pet_of(&b, &a).pet, r.pet);
        let c = passage("c", "y", 9.0, Some(11.0));
        let r = pet_of(&a, &c);
        assert_eq!(r.pet, 0.0);
        assert!(r.proximity);
    }
}
