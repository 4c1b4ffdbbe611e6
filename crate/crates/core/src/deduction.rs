//! Parallel deduction: when a human takes over, rerun the scene from the
//! takeover snapshot with the AUT still driving and judge whether it would
//! have coped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::min_ttc;
use crate::harness::aut::AutAdapter;
use crate::harness::runlog::{LogEvent, RunLog, TickRecord};
use crate::harness::scenario::ScenarioSpec;
use crate::harness::session::{Session, SessionError, Snapshot};
use crate::world::map::ScenarioMap;

/// Default branch length (s).
pub const DEFAULT_HORIZON: f64 = 30.0;
/// A vehicle slower than this (m/s) for [`STALL_WINDOW`] seconds has stalled.
pub const STALL_SPEED: f64 = 0.1;
pub const STALL_WINDOW: f64 = 10.0;
/// Branch min-TTC below this, and below the manual one, is a regression.
pub const SAFETY_TTC: f64 = 2.5;
const TTC_HORIZON: f64 = 10.0;
const TTC_DCOL: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DeductionError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("vehicle {0} not in snapshot")]
    UnknownVehicle(String),
    #[error("logs do not share an origin: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiator {
    Operator,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TakeoverEvent {
    pub vehicle: String,
    pub tick: u64,
    pub initiator: Initiator,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Capable,
    Incapable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub collision: bool,
    pub task_completed: bool,
    /// None when nothing ever closed in on the vehicle.
    pub min_ttc: Option<f64>,
    /// Largest braking magnitude (m/s², non-negative).
    pub max_decel: f64,
    pub timeout: bool,
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeductionVerdict {
    pub vehicle: String,
    pub tick: u64,
    pub outcome: Outcome,
    pub evidence: Evidence,
    #[serde(skip)]
    pub branch_log: Option<RunLog>,
}

/// Outcome from evidence. Collisions and stalls are incapable, a clean
/// completion is capable, an AUT timeout or an unfinished task at the
/// horizon is inconclusive.
pub fn judge(ev: &Evidence) -> Outcome {
    if ev.collision {
        Outcome::Incapable
    } else if ev.task_completed {
        Outcome::Capable
    } else if ev.timeout {
        Outcome::Inconclusive
    } else if ev.stalled {
        Outcome::Incapable
    } else {
        Outcome::Inconclusive
    }
}

/// Evidence about `vehicle` in `log`.
pub fn gather_evidence(log: &RunLog, vehicle: &str) -> Evidence {
    let mut ev = Evidence {
        collision: false,
        task_completed: false,
        min_ttc: None,
        max_decel: 0.0,
        timeout: false,
        stalled: false,
    };
    for e in &log.events {
        match &e.event {
            LogEvent::Collision { a, b } if a == vehicle || b == vehicle => ev.collision = true,
            LogEvent::RouteComplete { vehicle: v } if v == vehicle => ev.task_completed = true,
            LogEvent::AutTimeout { vehicle: v } | LogEvent::AutError { vehicle: v, .. } if v == vehicle => ev.timeout = true,
            _ => {}
        }
    }
    for t in &log.ticks {
        let Some(me) = t.entities.get(vehicle) else { continue };
        ev.max_decel = ev.max_decel.max(-me.accel);
        if let Some(m) = min_ttc(&t.entities, me, TTC_HORIZON, TTC_DCOL) {
            ev.min_ttc = Some(ev.min_ttc.map_or(m, |p: f64| p.min(m)));
        }
    }
    let dt = log.header.dt;
    let window = (STALL_WINDOW / dt).round() as usize;
    let speeds: Vec<f64> = log.ticks.iter().filter_map(|t| t.entities.get(vehicle)).map(|e| e.speed).collect();
    ev.stalled = !ev.task_completed && speeds.len() >= window && speeds[speeds.len() - window..].iter().all(|v| *v < STALL_SPEED);
    ev
}

/// Run the branch from `snap` with `vehicle` left to its AUT for `horizon`
/// seconds.
pub fn run_deduction(
    snap: &Snapshot,
    spec: &ScenarioSpec,
    map: &ScenarioMap,
    vehicle: &str,
    adapters: BTreeMap<String, Box<dyn AutAdapter>>,
    horizon: f64,
) -> Result<DeductionVerdict, DeductionError> {
    if !snap.state.world.entities.contains_key(vehicle) {
        return Err(DeductionError::UnknownVehicle(vehicle.to_string()));
    }
    let log = Session::fork(spec.clone(), map.clone(), snap, vehicle, horizon, adapters)?.run()?;
    let evidence = gather_evidence(&log, vehicle);
    Ok(DeductionVerdict {
        vehicle: vehicle.to_string(),
        tick: snap.tick,
        outcome: judge(&evidence),
        evidence,
        branch_log: Some(log),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeComparison {
    pub vehicle: String,
    pub origin: u64,
    /// Branch minus manual, seconds from the origin to route completion.
    /// None unless both completed.
    pub task_time: Option<f64>,
    pub min_ttc: Option<f64>,
    pub max_decel: f64,
    pub max_jerk: f64,
    pub safety_regression: bool,
}

struct Continuation {
    task_time: Option<f64>,
    min_ttc: Option<f64>,
    max_decel: f64,
    max_jerk: f64,
}

fn continuation(log: &RunLog, ticks: &[TickRecord], vehicle: &str, origin: u64) -> Continuation {
    let dt = log.header.dt;
    let done = log.events.iter().find(|e| {
        e.tick >= origin && matches!(&e.event, LogEvent::RouteComplete { vehicle: v } if v == vehicle)
    });
    let ev = gather_evidence(
        &RunLog {
            header: log.header.clone(),
            ticks: ticks.to_vec(),
            events: Vec::new(),
            footer: None,
        },
        vehicle,
    );
    let accels: Vec<f64> = ticks.iter().filter_map(|t| t.entities.get(vehicle)).map(|e| e.accel).collect();
    let max_jerk = accels.windows(2).map(|w| ((w[1] - w[0]) / dt).abs()).fold(0.0, f64::max);
    Continuation {
        task_time: done.map(|e| (e.tick + 1 - origin) as f64 * dt),
        min_ttc: ev.min_ttc,
        max_decel: ev.max_decel,
        max_jerk,
    }
}

/// Branch-minus-manual deltas from the shared origin onwards. Both logs
/// must start their comparison window at the same tick with the vehicle in
/// the same place.
pub fn compare_outcomes(manual: &RunLog, branch: &RunLog, vehicle: &str) -> Result<OutcomeComparison, DeductionError> {
    let first = branch.ticks.first().ok_or_else(|| DeductionError::Alignment("branch log is empty".into()))?;
    let origin = first.tick;
    let m0 = manual
        .tick(origin)
        .ok_or_else(|| DeductionError::Alignment(format!("manual log has no tick {origin}")))?;
    let (a, b) = match (m0.entities.get(vehicle), first.entities.get(vehicle)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DeductionError::UnknownVehicle(vehicle.to_string())),
    };
    if a.pose != b.pose || a.speed != b.speed {
        return Err(DeductionError::Alignment(format!("{vehicle} differs at tick {origin}")));
    }
    let start = manual.ticks.iter().position(|t| t.tick == origin).unwrap_or(0);
    let m = continuation(manual, &manual.ticks[start..], vehicle, origin);
    let b = continuation(branch, &branch.ticks, vehicle, origin);
    let min_ttc = match (b.min_ttc, m.min_ttc) {
        (Some(x), Some(y)) => Some(x - y),
        _ => None,
    };
    let safety_regression = b.min_ttc.is_some_and(|bt| bt < SAFETY_TTC && m.min_ttc.is_none_or(|mt| bt < mt));
    Ok(OutcomeComparison {
        vehicle: vehicle.to_string(),
        origin,
        task_time: b.task_time.zip(m.task_time).map(|(x, y)| x - y),
        min_ttc,
        max_decel: b.max_decel - m.max_decel,
        max_jerk: b.max_jerk - m.max_jerk,
        safety_regression,
    })
}
