//! Vehicle-to-vehicle and vehicle-to-infrastructure cooperation.

pub mod cda;
pub mod spat;
pub mod warnings;

pub use cda::{consensus_check, validate_cda_session, CdaLevel, CdaSession, Consensus};
pub use spat::{glosa_advice, spat_next, Advice, SignalPlan, Spat};
pub use warnings::{mec_warnings, Warning, WarningKind};
