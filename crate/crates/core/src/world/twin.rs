//! Digital twins of un-instrumented (human-driven) vehicles.
//!
//! A roadside sensor observes the vehicle; the twin takes the observed pose
//! plus a perception error drawn uniformly from a disk.

use serde::{Deserialize, Serialize};

use super::{EntityKind, EntityState, Pose, WorldError, WorldState};
use crate::rng::SimRng;

/// Default perception error radius in metres.
pub const DEFAULT_NOISE_BOUND: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinObservation {
    pub id: String,
    pub pose: Pose,
    pub speed: f64,
}

/// Uniform point in a disk of the given radius.
pub fn disk_noise(radius: f64, rng: &mut SimRng) -> (f64, f64) {
    if radius <= 0.0 {
        return (0.0, 0.0);
    }
    let r = radius * rng.uniform().sqrt();
    let th = 2.0 * std::f64::consts::PI * rng.uniform();
    (r * th.cos(), r * th.sin())
}

/// Update the registered twin from an observation. Only the pose and speed
/// change; the twin keeps its lane bookkeeping.
pub fn twin_update(
    world: &mut WorldState,
    obs: &TwinObservation,
    noise_bound: f64,
) -> Result<EntityState, WorldError> {
    let twin = world
        .entities
        .get_mut(&obs.id)
        .filter(|e| e.kind == EntityKind::HdvTwin)
        .ok_or_else(|| WorldError::TwinMiss(obs.id.clone()))?;
    let (dx, dy) = disk_noise(noise_bound, &mut world.rng.twin);
    twin.pose = Pose::new(obs.pose.x + dx, obs.pose.y + dy, obs.pose.heading);
    twin.speed = obs.speed.max(0.0);
    Ok(twin.clone())
}
