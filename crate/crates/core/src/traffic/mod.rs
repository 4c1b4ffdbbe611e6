//! Background traffic: IDM car following, MOBIL lane changes, Poisson
//! spawning, and the registry of externally controlled vehicles that the
//! background flow must react to.

pub mod driver;
pub mod flow;
pub mod idm;
pub mod mobil;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use driver::{baseline_control, perceive, DriverOptions, Perception};
pub use flow::{spawn_flow, FlowSpec, FlowState};
pub use idm::{idm_accel, IdmParams};
pub use mobil::{mobil_decide, LaneDecision, MobilParams};

use crate::world::{EntityKind, EntityState};

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("vehicles overlap (gap {0} m)")]
    Overlap(f64),
    #[error("entity {0} is already mapped into the flow")]
    DuplicateMapping(String),
}

/// Which external entities background vehicles see, plus flow counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficFlow {
    mapped: BTreeSet<String>,
    /// Mapped this tick; visible from the next one.
    incoming: BTreeSet<String>,
    pub spawned: u64,
    pub despawned: u64,
}

impl TrafficFlow {
    /// Make an external entity part of the gap computations of background
    /// vehicles from the next tick on.
    pub fn map_external(&mut self, e: &EntityState) -> Result<(), TrafficError> {
        if self.mapped.contains(&e.id) || !self.incoming.insert(e.id.clone()) {
            return Err(TrafficError::DuplicateMapping(e.id.clone()));
        }
        Ok(())
    }

    pub fn unmap(&mut self, id: &str) {
        self.mapped.remove(id);
        self.incoming.remove(id);
    }

    /// Called at the start of each tick.
    pub fn begin_tick(&mut self) {
        self.mapped.append(&mut self.incoming);
    }

    pub fn is_mapped(&self, id: &str) -> bool {
        self.mapped.contains(id)
    }

    /// Whether a background vehicle reacts to `e`.
    pub fn visible_to_background(&self, e: &EntityState) -> bool {
        e.kind == EntityKind::Background || self.mapped.contains(&e.id)
    }
}
