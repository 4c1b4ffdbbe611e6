//! Background flow generation: Poisson arrivals at an entry lane, released
//! only when the entry headway allows.

use serde::{Deserialize, Serialize};

use super::idm::IdmParams;
use crate::rng::SimRng;
use crate::world::map::ScenarioMap;
use crate::world::{ControlMode, EntityKind, EntityState, WorldError};

fn default_kind() -> EntityKind {
    EntityKind::Background
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub id: String,
    /// Entry lane.
    pub lane: String,
    /// Lanes driven after the entry lane.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub route: Vec<String>,
    /// Vehicles per hour.
    pub rate: f64,
    pub speed_init: f64,
    #[serde(default)]
    pub params: IdmParams,
    /// Fraction of spawned vehicles eligible for adversarial control.
    #[serde(default)]
    pub mix: f64,
    #[serde(default = "default_kind")]
    pub kind: EntityKind,
    /// No arrivals after this time, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<f64>,
}

impl FlowSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err("rate must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err("mix must be in [0, 1]".into());
        }
        if !(self.speed_init >= 0.0) {
            return Err("speed_init must be >= 0".into());
        }
        self.params.validate()
    }

    /// Minimum free distance at the entry before a vehicle is released.
    pub fn entry_headway(&self) -> f64 {
        self.params.s0 + self.speed_init * self.params.t_headway
    }
}

/// Arrival bookkeeping of one flow.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowState {
    next_arrival: Option<f64>,
    /// Arrived but not yet released vehicles.
    pub pending: u32,
    pub spawned: u64,
}

/// Advance the arrival process to `now` and release at most one vehicle.
/// `entry_gap` is the free distance from the lane start to the rear of the
/// nearest vehicle on the entry lane (`None` if the lane is empty).
pub fn spawn_flow(
    spec: &FlowSpec,
    state: &mut FlowState,
    map: &ScenarioMap,
    now: f64,
    entry_gap: Option<f64>,
    rng: &mut SimRng,
) -> Result<Option<EntityState>, WorldError> {
    let rate = spec.rate / 3600.0;
    let mut next = match state.next_arrival {
        Some(t) => t,
        None => now + rng.exponential(rate),
    };
    while next <= now && spec.until.is_none_or(|u| next <= u) {
        state.pending += 1;
        next += rng.exponential(rate);
    }
    state.next_arrival = Some(next);
    if state.pending == 0 {
        return Ok(None);
    }
    if entry_gap.is_some_and(|g| g < spec.entry_headway()) {
        return Ok(None);
    }
    let id = format!("{}-{}", spec.id, state.spawned);
    let mut e = EntityState::on_lane(id, spec.kind, map, &spec.lane, 0.0, spec.speed_init)?;
    e.route = spec.route.clone();
    e.control_mode = ControlMode::Auto;
    e.adversarial_eligible = spec.mix > 0.0 && rng.bernoulli(spec.mix);
    state.pending -= 1;
    state.spawned += 1;
    Ok(Some(e))
}
