//! The authoritative world: entities, signal state, clocks and the tick
//! kinematics.
//!
//! Vehicles are point masses that follow lane centre lines. A lane change
//! re-anchors the vehicle on the target lane and blends its lateral offset
//! to zero over [`LANE_CHANGE_TIME`] seconds. Entities without a lane
//! (pedestrians, scripted walkers) move straight along their heading.

pub mod clock;
pub mod map;
pub mod twin;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cooperation::spat::{SignalPlan, Spat};
use crate::rng::RngStreams;
use clock::ClockModel;
use map::ScenarioMap;

/// Seconds for a lane change to complete.
pub const LANE_CHANGE_TIME: f64 = 3.0;
/// Lateral drift rate towards a requested offset outside lane changes (m/s).
const LATERAL_RATE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("control for unknown entity {0} rejected")]
    RejectedControl(String),
    #[error("time step must be positive, got {0}")]
    InvalidDt(f64),
    #[error("no twin registered for {0}")]
    TwinMiss(String),
    #[error("entity {0} already exists")]
    DuplicateEntity(String),
    #[error("entity {id} references unknown lane {lane}")]
    UnknownLane { id: String, lane: String },
}

/// Normalize an angle to `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    PhysicalCav,
    CloudControlled,
    HdvTwin,
    Pedestrian,
    Rsu,
    VirtualCav,
    RemoteHdv,
    Background,
}

impl EntityKind {
    pub fn is_vehicle(self) -> bool {
        !matches!(self, EntityKind::Pedestrian | EntityKind::Rsu)
    }

    /// Element realised by physical hardware on a real test track.
    pub fn is_physical(self) -> bool {
        matches!(
            self,
            EntityKind::PhysicalCav | EntityKind::CloudControlled | EntityKind::HdvTwin | EntityKind::Rsu
        )
    }

    /// Connected vehicle that shares its state over V2X.
    pub fn is_cav(self) -> bool {
        matches!(
            self,
            EntityKind::PhysicalCav | EntityKind::CloudControlled | EntityKind::VirtualCav
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Auto,
    Manual,
    Adversarial,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneIntent {
    #[default]
    Keep,
    Left,
    Right,
}

/// Control applied to one entity for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub accel: f64,
    #[serde(default)]
    pub intent: LaneIntent,
    /// Requested steady lateral offset from the lane centre (left positive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lateral: Option<f64>,
}

impl Control {
    pub fn accel(accel: f64) -> Self {
        Self {
            accel,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChange {
    pub start_offset: f64,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub id: String,
    pub kind: EntityKind,
    pub pose: Pose,
    pub speed: f64,
    pub accel: f64,
    pub lane: Option<String>,
    #[serde(default)]
    pub station: f64,
    /// Lanes still to drive after the current one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub route: Vec<String>,
    #[serde(default)]
    pub lateral_offset: f64,
    #[serde(default)]
    pub lateral_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_change: Option<LaneChange>,
    pub control_mode: ControlMode,
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub adversarial_eligible: bool,
    /// Set once the entity has driven past the end of its route.
    #[serde(default)]
    pub finished: bool,
}

impl EntityState {
    /// A vehicle placed on `lane` at `station`, pose taken from the map.
    pub fn on_lane(
        id: impl Into<String>,
        kind: EntityKind,
        map: &ScenarioMap,
        lane: &str,
        station: f64,
        speed: f64,
    ) -> Result<Self, WorldError> {
        let id = id.into();
        let l = map.lane(lane).ok_or_else(|| WorldError::UnknownLane {
            id: id.clone(),
            lane: lane.to_string(),
        })?;
        let (x, y, h) = l.pose_at(station);
        Ok(Self {
            id,
            kind,
            pose: Pose::new(x, y, h),
            speed: speed.max(0.0),
            accel: 0.0,
            lane: Some(lane.to_string()),
            station,
            route: Vec::new(),
            lateral_offset: 0.0,
            lateral_target: 0.0,
            lane_change: None,
            control_mode: ControlMode::Auto,
            length: 4.5,
            width: 1.8,
            adversarial_eligible: false,
            finished: false,
        })
    }

    /// An entity placed by pose only (pedestrians, RSUs).
    pub fn free(id: impl Into<String>, kind: EntityKind, pose: Pose, speed: f64) -> Self {
        let (length, width) = match kind {
            EntityKind::Pedestrian => (0.5, 0.5),
            EntityKind::Rsu => (1.0, 1.0),
            _ => (4.5, 1.8),
        };
        Self {
            id: id.into(),
            kind,
            pose,
            speed: speed.max(0.0),
            accel: 0.0,
            lane: None,
            station: 0.0,
            route: Vec::new(),
            lateral_offset: 0.0,
            lateral_target: 0.0,
            lane_change: None,
            control_mode: ControlMode::Scripted,
            length,
            width,
            adversarial_eligible: false,
            finished: false,
        }
    }

    pub fn velocity(&self) -> (f64, f64) {
        (
            self.speed * self.pose.heading.cos(),
            self.speed * self.pose.heading.sin(),
        )
    }

    /// Corners of the footprint rectangle.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (c, s) = (self.pose.heading.cos(), self.pose.heading.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
            .map(|(dx, dy)| (self.pose.x + dx * c - dy * s, self.pose.y + dx * s + dy * c))
    }

    /// Rectangle overlap by separating axes.
    pub fn overlaps(&self, other: &EntityState) -> bool {
        let reach = (self.length.hypot(self.width) + other.length.hypot(other.width)) / 2.0;
        if self.pose.distance(&other.pose) > reach {
            return false;
        }
        let (a, b) = (self.corners(), other.corners());
        let axes = [self.pose.heading, self.pose.heading + PI / 2.0, other.pose.heading, other.pose.heading + PI / 2.0];
        axes.iter().all(|&th| {
            let (ux, uy) = (th.cos(), th.sin());
            let proj = |pts: &[(f64, f64); 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.0 * ux + p.1 * uy;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&a);
            let (b0, b1) = proj(&b);
            a1 >= b0 && b1 >= a0
        })
    }
}

/// Distance covered and final speed over `dt` under constant `accel`, with
/// the speed held at zero once braking reaches a standstill.
pub fn integrate_speed(v: f64, accel: f64, dt: f64) -> (f64, f64) {
    let v1 = v + accel * dt;
    if v1 >= 0.0 {
        (v * dt + 0.5 * accel * dt * dt, v1)
    } else {
        let t_stop = v / -accel;
        (0.5 * v * t_stop, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tick: u64,
    pub dt: f64,
    pub entities: BTreeMap<String, EntityState>,
    pub signal_plans: BTreeMap<String, SignalPlan>,
    pub signal_state: BTreeMap<String, Spat>,
    pub clocks: BTreeMap<String, ClockModel>,
    pub rng: RngStreams,
}

impl WorldState {
    pub fn new(seed: u64, dt: f64) -> Self {
        Self {
            tick: 0,
            dt,
            entities: BTreeMap::new(),
            signal_plans: BTreeMap::new(),
            signal_state: BTreeMap::new(),
            clocks: BTreeMap::new(),
            rng: RngStreams::new(seed),
        }
    }

    pub fn sim_time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn spawn(&mut self, e: EntityState) -> Result<(), WorldError> {
        if self.entities.contains_key(&e.id) {
            return Err(WorldError::DuplicateEntity(e.id));
        }
        self.entities.insert(e.id.clone(), e);
        Ok(())
    }

    pub fn despawn(&mut self, id: &str) -> Option<EntityState> {
        self.entities.remove(id)
    }

    /// Recompute every signal's SPAT for the current time.
    pub fn refresh_signals(&mut self) {
        let now = self.sim_time();
        self.signal_state = self
            .signal_plans
            .iter()
            .map(|(id, p)| (id.clone(), p.spat_at(now)))
            .collect();
    }

    /// Advance one step. Entities without a control keep their previous
    /// acceleration.
    pub fn advance_tick(
        &mut self,
        map: &ScenarioMap,
        controls: &BTreeMap<String, Control>,
        dt: f64,
    ) -> Result<(), WorldError> {
        if !(dt > 0.0) {
            return Err(WorldError::InvalidDt(dt));
        }
        if let Some(id) = controls.keys().find(|id| !self.entities.contains_key(*id)) {
            return Err(WorldError::RejectedControl(id.clone()));
        }
        for (id, e) in self.entities.iter_mut() {
            let intent = match controls.get(id) {
                Some(c) => {
                    e.accel = c.accel;
                    if let Some(l) = c.lateral {
                        e.lateral_target = l;
                    }
                    c.intent
                }
                None => LaneIntent::Keep,
            };
            step_entity(e, map, intent, dt);
        }
        self.tick += 1;
        self.refresh_signals();
        Ok(())
    }

    /// Pairs of overlapping vehicles/pedestrians, ordered by id.
    pub fn collisions(&self) -> Vec<(String, String)> {
        let movers: Vec<&EntityState> = self
            .entities
            .values()
            .filter(|e| e.kind != EntityKind::Rsu && !e.finished)
            .collect();
        let mut out = Vec::new();
        for (i, a) in movers.iter().enumerate() {
            for b in &movers[i + 1..] {
                if a.overlaps(b) {
                    out.push((a.id.clone(), b.id.clone()));
                }
            }
        }
        out
    }
}

fn step_entity(e: &mut EntityState, map: &ScenarioMap, intent: LaneIntent, dt: f64) {
    if e.kind == EntityKind::Rsu {
        return;
    }
    let (ds, v1) = integrate_speed(e.speed, e.accel, dt);
    e.speed = v1;
    let lane = e.lane.as_ref().and_then(|l| map.lane(l));
    let Some(mut lane) = lane else {
        e.pose.x += ds * e.pose.heading.cos();
        e.pose.y += ds * e.pose.heading.sin();
        return;
    };

    if e.lane_change.is_none() && intent != LaneIntent::Keep {
        let target = match intent {
            LaneIntent::Left => lane.left.as_deref(),
            LaneIntent::Right => lane.right.as_deref(),
            LaneIntent::Keep => None,
        };
        if let Some(t) = target.and_then(|t| map.lane(t)) {
            let (s, lat) = t.project(e.pose.x, e.pose.y);
            e.station = s;
            e.lateral_offset = lat;
            e.lane_change = Some(LaneChange {
                start_offset: lat,
                elapsed: 0.0,
            });
            e.lane = Some(t.id.clone());
            e.route.clear();
            lane = t;
        }
    }

    e.station += ds;
    while e.station > lane.length() && !e.route.is_empty() {
        let next = e.route.remove(0);
        match map.lane(&next) {
            Some(n) => {
                e.station -= lane.length();
                e.lane = Some(next);
                lane = n;
            }
            None => break,
        }
    }
    if e.station > lane.length() && e.route.is_empty() {
        e.finished = true;
    }

    let prev_offset = e.lateral_offset;
    match &mut e.lane_change {
        Some(lc) => {
            lc.elapsed += dt;
            let f = (lc.elapsed / LANE_CHANGE_TIME).min(1.0);
            let blend = f * f * (3.0 - 2.0 * f);
            e.lateral_offset = e.lateral_target + (lc.start_offset - e.lateral_target) * (1.0 - blend);
            if f >= 1.0 {
                e.lane_change = None;
            }
        }
        None => {
            let step = LATERAL_RATE * dt;
            e.lateral_offset += (e.lateral_target - e.lateral_offset).clamp(-step, step);
        }
    }
    let lat_rate = (e.lateral_offset - prev_offset) / dt;

    let (x, y, h) = lane.pose_at(e.station);
    let heading = if e.speed > 0.1 {
        h + lat_rate.atan2(e.speed)
    } else {
        h
    };
    e.pose = Pose::new(
        x - h.sin() * e.lateral_offset,
        y + h.cos() * e.lateral_offset,
        heading,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use map::Lane;

    fn straight_map() -> ScenarioMap {
        let mut a = Lane::new("a", 3.5, 20.0, vec![[0.0, 0.0], [1000.0, 0.0]]).unwrap();
        let mut b = Lane::new("b", 3.5, 20.0, vec![[0.0, 3.5], [1000.0, 3.5]]).unwrap();
        a.left = Some("b".into());
        b.right = Some("a".into());
        ScenarioMap::new("straight", vec![a, b]).unwrap()
    }

    fn world_with(speed: f64, accel: f64) -> (ScenarioMap, WorldState) {
        let map = straight_map();
        let mut w = WorldState::new(1, 0.1);
        let mut e = EntityState::on_lane("v", EntityKind::VirtualCav, &map, "a", 0.0, speed).unwrap();
        e.accel = accel;
        w.spawn(e).unwrap();
        (map, w)
    }

    #[test]
    fn constant_velocity_step() {
        let (map, mut w) = world_with(10.0, 0.0);
        w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        let e = &w.entities["v"];
        assert!((e.pose.x - 1.0).abs() < 1e-12);
        assert_eq!(e.speed, 10.0);
        assert_eq!(w.tick, 1);
    }

    #[test]
    fn braking_clamps_at_zero() {
        let (map, mut w) = world_with(1.0, -20.0);
        w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        let e = &w.entities["v"];
        assert_eq!(e.speed, 0.0);
        assert!((e.pose.x - 0.025).abs() < 1e-12);
    }

    #[test]
    fn accelerating_step_matches_closed_form() {
        let (map, mut w) = world_with(10.0, 2.0);
        w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        let e = &w.entities["v"];
        assert!((e.speed - 10.2).abs() < 1e-12);
        assert!((e.pose.x - (10.0 * 0.1 + 0.5 * 2.0 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn controls_persist_and_unknown_ids_are_rejected() {
        let (map, mut w) = world_with(10.0, 0.0);
        let mut c = BTreeMap::new();
        c.insert("v".to_string(), Control::accel(1.0));
        w.advance_tick(&map, &c, 0.1).unwrap();
        w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        assert_eq!(w.entities["v"].accel, 1.0);
        let mut bad = BTreeMap::new();
        bad.insert("ghost".to_string(), Control::accel(1.0));
        assert_eq!(
            w.advance_tick(&map, &bad, 0.1),
            Err(WorldError::RejectedControl("ghost".into()))
        );
        assert_eq!(w.tick, 2);
    }

    #[test]
    fn lane_change_blends_over_three_seconds() {
        let (map, mut w) = world_with(10.0, 0.0);
        let mut c = BTreeMap::new();
        c.insert(
            "v".to_string(),
            Control {
                accel: 0.0,
                intent: LaneIntent::Left,
                lateral: None,
            },
        );
        w.advance_tick(&map, &c, 0.1).unwrap();
        assert_eq!(w.entities["v"].lane.as_deref(), Some("b"));
        let y1 = w.entities["v"].pose.y;
        assert!(y1 > 0.0 && y1 < 0.5);
        for _ in 0..29 {
            w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        }
        let e = &w.entities["v"];
        assert!((e.pose.y - 3.5).abs() < 1e-9);
        assert!(e.lane_change.is_none());
        assert!((e.pose.x - 30.0).abs() < 1e-9);
    }

    #[test]
    fn heading_is_normalized() {
        let p = Pose::new(0.0, 0.0, 3.0 * PI);
        assert!((p.heading - PI).abs() < 1e-12);
        let p = Pose::new(0.0, 0.0, -PI);
        assert!((p.heading - PI).abs() < 1e-12);
    }

    #[test]
    fn overlap_detection() {
        let map = straight_map();
        let a = EntityState::on_lane("a", EntityKind::Background, &map, "a", 10.0, 0.0).unwrap();
        let mut b = EntityState::on_lane("b", EntityKind::Background, &map, "a", 14.0, 0.0).unwrap();
        assert!(a.overlaps(&b));
        b = EntityState::on_lane("b", EntityKind::Background, &map, "a", 15.0, 0.0).unwrap();
        assert!(!a.overlaps(&b));
        let c = EntityState::on_lane("c", EntityKind::Background, &map, "b", 10.0, 0.0).unwrap();
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn route_continues_onto_next_lane() {
        let a = Lane::new("a", 3.5, 20.0, vec![[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let b = Lane::new("b", 3.5, 20.0, vec![[10.0, 0.0], [10.0, 100.0]]).unwrap();
        let map = ScenarioMap::new("bend", vec![a, b]).unwrap();
        let mut w = WorldState::new(1, 0.1);
        let mut e = EntityState::on_lane("v", EntityKind::Background, &map, "a", 9.5, 10.0).unwrap();
        e.route = vec!["b".into()];
        w.spawn(e).unwrap();
        w.advance_tick(&map, &BTreeMap::new(), 0.1).unwrap();
        let e = &w.entities["v"];
        assert_eq!(e.lane.as_deref(), Some("b"));
        assert!((e.station - 0.5).abs() < 1e-12);
        assert!((e.pose.y - 0.5).abs() < 1e-12);
        assert!(!e.finished);
    }
}
