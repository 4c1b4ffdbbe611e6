//! Scenario files.
//!
//! ```toml
//! version = 1
//! id = "car-following"
//! class = "car_following"
//! map = "maps/straight.toml"
//! seed = 7
//! duration = 40.0
//! vut = "vut"
//!
//! [[roster]]
//! id = "vut"
//! kind = "virtual_cav"
//! control = "aut"
//! adapter = "idm"
//! lane = "main-0"
//! speed = 12.0
//!
//! [[adapters]]
//! id = "idm"
//! kind = "builtin"
//! policy = "idm"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::{AdversaryConfig, ScenarioClass};
use crate::bus::ChannelConfig;
use crate::cooperation::cda::CdaSession;
use crate::cooperation::warnings::WarningConfig;
use crate::harness::aut::BUILTIN_POLICIES;
use crate::traffic::{FlowSpec, IdmParams};
use crate::world::clock::ClockMode;
use crate::world::map::{MapError, ScenarioMap};
use crate::world::EntityKind;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported scenario version {0} (expected {SPEC_VERSION})")]
    Version(u32),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{field}: unknown {what} {reference}")]
    Dangling {
        field: String,
        what: &'static str,
        reference: String,
    },
    #[error("map: {0}")]
    Map(#[from] MapError),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SpecError {
    SpecError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

fn dangling(field: impl Into<String>, what: &'static str, reference: &str) -> SpecError {
    SpecError::Dangling {
        field: field.into(),
        what,
        reference: reference.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// The built-in IDM/MOBIL driver.
    #[default]
    Baseline,
    /// An algorithm under test behind an adapter.
    Aut,
    /// Driven by the operator from the start.
    Console,
    /// Holds its initial acceleration; moves along its heading or lane.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub id: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub control: ControlSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<String>,
    #[serde(default)]
    pub station: f64,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub accel: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub route: Vec<String>,
    /// `[x, y, heading]` for entities not placed on a lane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<IdmParams>,
    #[serde(default)]
    pub adversarial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<ClockMode>,
    /// RSU coverage radius for edge warnings (m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Builtin,
    Tcp,
}

fn default_deadline() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub id: String,
    pub kind: AdapterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<IdmParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptedEvent {
    Takeover {
        tick: u64,
        vehicle: String,
        #[serde(default)]
        reason: String,
    },
    Release {
        tick: u64,
        vehicle: String,
    },
    /// Jump a signal to the start of a stage.
    SignalStage {
        tick: u64,
        signal: String,
        stage: usize,
    },
    SetIntensity {
        tick: u64,
        value: f64,
    },
}

impl ScriptedEvent {
    pub fn tick(&self) -> u64 {
        match self {
            ScriptedEvent::Takeover { tick, .. }
            | ScriptedEvent::Release { tick, .. }
            | ScriptedEvent::SignalStage { tick, .. }
            | ScriptedEvent::SetIntensity { tick, .. } => *tick,
        }
    }
}

fn default_horizon() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeductionConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

impl Default for DeductionConfig {
    fn default() -> Self {
        Self { horizon: 30.0 }
    }
}

fn default_true() -> bool {
    true
}

fn default_channels() -> Vec<ChannelConfig> {
    vec![
        ChannelConfig::platform("platform"),
        ChannelConfig::broadcast("v2x"),
        ChannelConfig::broadcast("rsu"),
    ]
}

fn default_class() -> ScenarioClass {
    ScenarioClass::Generic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub version: u32,
    pub id: String,
    #[serde(default = "default_class")]
    pub class: ScenarioClass,
    /// Map file, relative to the scenario file.
    pub map: String,
    pub seed: u64,
    /// Seconds of simulated time.
    pub duration: f64,
    pub vut: String,
    #[serde(default = "default_true")]
    pub halt_on_collision: bool,
    /// Stop once the VUT has completed its route.
    #[serde(default = "default_true")]
    pub stop_on_completion: bool,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub deduction: DeductionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warnings: Option<WarningConfig>,
    #[serde(default)]
    pub roster: Vec<RosterEntry>,
    #[serde(default)]
    pub adapters: Vec<AdapterSpec>,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default = "default_channels")]
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub events: Vec<ScriptedEvent>,
    #[serde(default)]
    pub sessions: Vec<CdaSession>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl ScenarioSpec {
    /// Parse and check everything that does not need the map.
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            SpecError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario spec serializes")
    }

    pub fn roster_entry(&self, id: &str) -> Option<&RosterEntry> {
        self.roster.iter().find(|r| r.id == id)
    }

    pub fn adapter(&self, id: &str) -> Option<&AdapterSpec> {
        self.adapters.iter().find(|a| a.id == id)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn check(&self) -> Result<(), SpecError> {
        if self.version != SPEC_VERSION {
            return Err(SpecError::Version(self.version));
        }
        if self.id.is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(invalid("duration", "must be positive"));
        }
        let mut ids = BTreeSet::new();
        for (i, r) in self.roster.iter().enumerate() {
            let f = |name: &str| format!("roster[{i}].{name}");
            if !ids.insert(r.id.as_str()) {
                return Err(invalid(f("id"), format!("duplicate entity {}", r.id)));
            }
            if !(r.speed >= 0.0) {
                return Err(invalid(f("speed"), "must be non-negative"));
            }
            match (&r.lane, &r.pose) {
                (None, None) => return Err(invalid(f("lane"), "either lane or pose is required")),
                (Some(_), Some(_)) => return Err(invalid(f("pose"), "lane and pose are exclusive")),
                _ => {}
            }
            match (r.control, &r.adapter) {
                (ControlSource::Aut, None) => return Err(invalid(f("adapter"), "required for aut control")),
                (ControlSource::Aut, Some(a)) if self.adapter(a).is_none() => {
                    return Err(dangling(f("adapter"), "adapter", a));
                }
                (c, Some(_)) if c != ControlSource::Aut => {
                    return Err(invalid(f("adapter"), "only valid with aut control"));
                }
                _ => {}
            }
            if r.control != ControlSource::Scripted && r.lane.is_none() && r.kind.is_vehicle() {
                return Err(invalid(f("control"), "unlaned vehicles must be scripted"));
            }
            if let Some(p) = &r.params {
                p.validate().map_err(|e| invalid(f("params"), e.to_string()))?;
            }
            for (name, v) in [("length", r.length), ("width", r.width), ("coverage", r.coverage)] {
                if v.is_some_and(|v| !(v > 0.0)) {
                    return Err(invalid(f(name), "must be positive"));
                }
            }
        }
        match self.roster_entry(&self.vut) {
            None => return Err(dangling("vut", "entity", &self.vut)),
            Some(r) if !r.kind.is_vehicle() => return Err(invalid("vut", "must be a vehicle")),
            _ => {}
        }

        let mut adapter_ids = BTreeSet::new();
        for (i, a) in self.adapters.iter().enumerate() {
            let f = |name: &str| format!("adapters[{i}].{name}");
            if !adapter_ids.insert(a.id.as_str()) {
                return Err(invalid(f("id"), format!("duplicate adapter {}", a.id)));
            }
            match a.kind {
                AdapterKind::Builtin => match a.policy.as_deref() {
                    None => return Err(invalid(f("policy"), "required for builtin adapters")),
                    Some(p) if !BUILTIN_POLICIES.contains(&p) => return Err(dangling(f("policy"), "policy", p)),
                    _ => {}
                },
                AdapterKind::Tcp => {
                    if a.address.is_none() {
                        return Err(invalid(f("address"), "required for tcp adapters"));
                    }
                }
            }
            if a.deadline_ms == 0 {
                return Err(invalid(f("deadline_ms"), "must be positive"));
            }
        }

        let mut flow_ids = BTreeSet::new();
        for (i, fl) in self.flows.iter().enumerate() {
            if !flow_ids.insert(fl.id.as_str()) {
                return Err(invalid(format!("flows[{i}].id"), format!("duplicate flow {}", fl.id)));
            }
            fl.validate().map_err(|e| invalid(format!("flows[{i}]"), e))?;
        }

        let mut channel_names = BTreeSet::new();
        for (i, c) in self.channels.iter().enumerate() {
            if !channel_names.insert(c.name.as_str()) {
                return Err(invalid(format!("channels[{i}].name"), format!("duplicate channel {}", c.name)));
            }
            c.validate().map_err(|e| invalid(format!("channels[{i}]"), e.to_string()))?;
        }

        let a = &self.adversary;
        if !(a.t_crit < a.t_safe) || a.window == 0 || a.select_period == 0 || !(0.0..=1.0).contains(&a.initial_intensity) {
            return Err(invalid("adversary", "needs t_crit < t_safe, window > 0, select_period > 0 and intensity in [0, 1]"));
        }
        if !(self.deduction.horizon > 0.0) {
            return Err(invalid("deduction.horizon", "must be positive"));
        }

        for (i, e) in self.events.iter().enumerate() {
            let f = format!("events[{i}]");
            match e {
                ScriptedEvent::Takeover { vehicle, .. } | ScriptedEvent::Release { vehicle, .. } => {
                    match self.roster_entry(vehicle) {
                        None => return Err(dangling(format!("{f}.vehicle"), "entity", vehicle)),
                        Some(r) if !r.kind.is_vehicle() => {
                            return Err(invalid(format!("{f}.vehicle"), "must be a vehicle"));
                        }
                        _ => {}
                    }
                }
                ScriptedEvent::SetIntensity { value, .. } => {
                    if !(0.0..=1.0).contains(value) {
                        return Err(invalid(format!("{f}.value"), "must be in [0, 1]"));
                    }
                }
                ScriptedEvent::SignalStage { .. } => {}
            }
        }

        let mut session_ids = BTreeSet::new();
        for (i, s) in self.sessions.iter().enumerate() {
            if !session_ids.insert(s.id.as_str()) {
                return Err(invalid(format!("sessions[{i}].id"), format!("duplicate session {}", s.id)));
            }
            for p in &s.participants {
                if self.roster_entry(p).is_none() {
                    return Err(dangling(format!("sessions[{i}].participants"), "entity", p));
                }
            }
            if !(s.end > s.start) {
                return Err(invalid(format!("sessions[{i}]"), "end must follow start"));
            }
        }
        Ok(())
    }

    /// Check references into the map.
    pub fn validate_against(&self, map: &ScenarioMap) -> Result<(), SpecError> {
        for (i, r) in self.roster.iter().enumerate() {
            if let Some(l) = &r.lane {
                if !map.has_lane(l) {
                    return Err(dangling(format!("roster[{i}].lane"), "lane", l));
                }
                let len = map.lane(l).map_or(0.0, |l| l.length());
                if !(0.0..=len).contains(&r.station) {
                    return Err(invalid(format!("roster[{i}].station"), format!("outside lane {l} (0..{len:.1})")));
                }
            }
            if let Some(l) = r.route.iter().find(|l| !map.has_lane(l)) {
                return Err(dangling(format!("roster[{i}].route"), "lane", l));
            }
        }
        for (i, fl) in self.flows.iter().enumerate() {
            if !map.has_lane(&fl.lane) {
                return Err(dangling(format!("flows[{i}].lane"), "lane", &fl.lane));
            }
            if let Some(l) = fl.route.iter().find(|l| !map.has_lane(l)) {
                return Err(dangling(format!("flows[{i}].route"), "lane", l));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if let ScriptedEvent::SignalStage { signal, stage, .. } = e {
                match map.signals.iter().find(|s| &s.id == signal) {
                    None => return Err(dangling(format!("events[{i}].signal"), "signal", signal)),
                    Some(p) if *stage >= p.stages.len() => {
                        return Err(invalid(format!("events[{i}].stage"), "no such stage"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Parse a scenario file, load its map and check all references.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<(ScenarioSpec, ScenarioMap), SpecError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec = ScenarioSpec::from_toml(&text)?;
    let map = ScenarioMap::load(map_path(path, &spec))?;
    spec.validate_against(&map)?;
    Ok((spec, map))
}

/// Map location of `spec`, resolved against the scenario file's directory.
pub fn map_path(spec_path: &Path, spec: &ScenarioSpec) -> PathBuf {
    spec_path.parent().unwrap_or(Path::new(".")).join(&spec.map)
}
