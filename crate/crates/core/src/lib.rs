//! Deterministic virtual/physical fusion test harness for automated-driving
//! algorithms.
//!
//! The crate co-simulates "physical" and "virtual" traffic elements over a
//! latency-modelled message bus, runs adversarial, parallel-deduction and
//! cooperative-driving tests against pluggable algorithms under test (AUTs),
//! and scores both the algorithm (five intelligence dimensions) and the
//! platform itself (trajectory credibility metrics).
//!
//! Module map:
//!
//! - [`world`]: map, entities, clocks, digital twins, tick kinematics
//! - [`bus`]: platform and broadcast channels with latency, jitter and loss
//! - [`traffic`]: IDM/MOBIL background flow and the baseline driver
//! - [`adversary`]: 2D TTC, adaptive intensity, maneuver selection
//! - [`deduction`]: takeover snapshots and counterfactual branches
//! - [`cooperation`]: CDA session validation, consensus, SPAT, GLOSA, MEC warnings
//! - [`evaluation`]: metric registry, scoring, comparison, diagnosis
//! - [`credibility`]: DTW, PCA and the five similarity metrics
//! - [`harness`]: scenarios, run logs, risk field, AUT protocol, tick loop

#![forbid(unsafe_code)]

pub mod adversary;
pub mod bus;
pub mod cooperation;
pub mod credibility;
pub mod deduction;
pub mod evaluation;
pub mod harness;
pub mod rng;
pub mod traffic;
pub mod world;

pub use bus::{ChannelClass, ChannelConfig, MessageBus, MessageEnvelope, Payload};
pub use harness::runlog::RunLog;
pub use harness::scenario::ScenarioSpec;
pub use harness::session::{Session, SessionOptions, Snapshot};
pub use world::map::ScenarioMap;
pub use world::{Control, ControlMode, EntityKind, EntityState, LaneIntent, Pose, WorldState};

/// Fixed simulation step in seconds (10 Hz).
pub const DT: f64 = 0.1;
