//! Run logs: one JSON record per line.
//!
//! A log is a header, then for every tick its tick record followed by the
//! events raised while processing that tick, then a footer. Each line is
//! chained into a SHA-256 digest that the footer carries, so any edit to a
//! stored log is detectable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::aut::AutReply;
use super::scenario::ScenarioSpec;
use crate::adversary::Maneuver;
use crate::bus::MessageEnvelope;
use crate::cooperation::cda::TraceEntry;
use crate::cooperation::spat::Phase;
use crate::deduction::TakeoverEvent;
use crate::world::map::ScenarioMap;
use crate::world::EntityState;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("unsupported log version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub spec: ScenarioSpec,
    pub map: ScenarioMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub envelope: MessageEnvelope,
    pub recipients: Vec<String>,
}

/// State at the start of a tick and everything that happened during it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub entities: BTreeMap<String, EntityState>,
    /// Signal id → approach → phase.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub signals: BTreeMap<String, BTreeMap<String, Phase>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delivered: Vec<Delivery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub published: Vec<MessageEnvelope>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<MessageEnvelope>,
    /// Replies of algorithms under test, applied this tick.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aut: BTreeMap<String, AutReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Takeover(TakeoverEvent),
    Release { vehicle: String },
    SetIntensity { value: f64 },
    SignalStage { signal: String, stage: usize },
    Pause,
    Resume,
    Collision { a: String, b: String },
    Spawn { id: String },
    Despawn { id: String },
    ManeuverStart { vehicle: String, maneuver: Maneuver },
    ManeuverEnd { vehicle: String },
    AutTimeout { vehicle: String },
    AutError { vehicle: String, detail: String },
    RouteComplete { vehicle: String },
}

impl LogEvent {
    /// Events that come from outside the simulation and must be fed back in
    /// on replay.
    pub fn is_operator_command(&self) -> bool {
        match self {
            LogEvent::Takeover(t) => t.initiator == crate::deduction::Initiator::Operator,
            LogEvent::Release { .. } | LogEvent::SetIntensity { .. } | LogEvent::Pause | LogEvent::Resume => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u64,
    pub event: LogEvent,
    /// True for operator commands; scripted events carry false.
    #[serde(default)]
    pub operator: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Duration,
    Collision,
    RouteComplete,
    Aborted,
    /// Deduction branch reached its horizon.
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footer {
    pub ticks: u64,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(LogHeader),
    Tick(TickRecord),
    Event(EventRecord),
    Footer(Footer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
    pub events: Vec<EventRecord>,
    pub footer: Option<Footer>,
}

fn chain(prev: &[u8], line: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(line.as_bytes());
    h.finalize().to_vec()
}

fn line_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("log records serialize")
}

impl RunLog {
    pub fn new(spec: ScenarioSpec, map: ScenarioMap, dt: f64) -> Self {
        Self {
            header: LogHeader {
                version: LOG_VERSION,
                spec_hash: spec.hash(),
                seed: spec.seed,
                dt,
                spec,
                map,
            },
            ticks: Vec::new(),
            events: Vec::new(),
            footer: None,
        }
    }

    /// Body lines in file order, without the footer.
    fn body_lines(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(1 + self.ticks.len() + self.events.len());
        out.push(line_json(&Line::Header(self.header.clone())));
        let mut ev = self.events.iter().peekable();
        // Events raised before the first tick record belong at the top.
        while let Some(e) = ev.next_if(|e| self.ticks.first().is_none_or(|t| e.tick < t.tick)) {
            out.push(line_json(&Line::Event(e.clone())));
        }
        for t in &self.ticks {
            out.push(line_json(&Line::Tick(t.clone())));
            while let Some(e) = ev.next_if(|e| e.tick <= t.tick) {
                out.push(line_json(&Line::Event(e.clone())));
            }
        }
        for e in ev {
            out.push(line_json(&Line::Event(e.clone())));
        }
        out
    }

    /// Digest over all body lines.
    pub fn digest(&self) -> String {
        let mut d = Vec::new();
        for l in self.body_lines() {
            d = chain(&d, &l);
        }
        hex::encode(d)
    }

    /// Close the log with a footer carrying the digest.
    pub fn finish(&mut self, termination: Termination, detail: Option<String>) {
        self.footer = Some(Footer {
            ticks: self.ticks.len() as u64,
            termination,
            detail,
            digest: self.digest(),
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in self.body_lines() {
            let _ = writeln!(s, "{l}");
        }
        if let Some(f) = &self.footer {
            let _ = writeln!(s, "{}", line_json(&Line::Footer(f.clone())));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut header = None;
        let mut ticks: Vec<TickRecord> = Vec::new();
        let mut events = Vec::new();
        let mut footer = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let structure = |message: &str| LogError::Structure {
                line,
                message: message.to_string(),
            };
            if footer.is_some() {
                return Err(structure("record after footer"));
            }
            let rec: Line = serde_json::from_str(raw).map_err(|e| LogError::Parse {
                line,
                message: e.to_string(),
            })?;
            match rec {
                Line::Header(h) => {
                    if header.is_some() || line != 1 {
                        return Err(structure("header must be the first record"));
                    }
                    if h.version != LOG_VERSION {
                        return Err(LogError::Version(h.version));
                    }
                    header = Some(h);
                }
                _ if header.is_none() => return Err(structure("missing header")),
                Line::Tick(t) => {
                    if ticks.last().is_some_and(|p| t.tick <= p.tick) {
                        return Err(structure("tick records must strictly increase"));
                    }
                    ticks.push(t);
                }
                Line::Event(e) => events.push(e),
                Line::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or(LogError::Structure {
            line: 0,
            message: "empty log".into(),
        })?;
        Ok(Self {
            header,
            ticks,
            events,
            footer,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LogError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LogError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Footer digest matches the content and the header hash matches the
    /// embedded spec.
    pub fn verify(&self) -> bool {
        self.header.spec_hash == self.header.spec.hash()
            && self.footer.as_ref().is_some_and(|f| f.digest == self.digest() && f.ticks == self.ticks.len() as u64)
    }

    pub fn events_at(&self, tick: u64) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(move |e| e.tick == tick)
    }

    /// Delivered and dropped messages in bus order, for CDA validation.
    /// Messages still in flight when the log ends are left out.
    pub fn trace(&self) -> Vec<TraceEntry> {
        let mut out = Vec::new();
        for t in &self.ticks {
            out.extend(t.dropped.iter().map(|e| TraceEntry {
                envelope: e.clone(),
                delivered: false,
            }));
            out.extend(t.delivered.iter().map(|d| TraceEntry {
                envelope: d.envelope.clone(),
                delivered: true,
            }));
        }
        out
    }

    pub fn tick(&self, tick: u64) -> Option<&TickRecord> {
        self.ticks
            .binary_search_by_key(&tick, |t| t.tick)
            .ok()
            .map(|i| &self.ticks[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::map::Lane;
    use crate::world::EntityKind;

    fn log() -> RunLog {
        let map = ScenarioMap::new("m", vec![Lane::new("a", 3.5, 20.0, vec![[0.0, 0.0], [100.0, 0.0]]).unwrap()]).unwrap();
        let spec = ScenarioSpec::from_toml(
            "version = 1\nid = \"t\"\nmap = \"m.toml\"\nseed = 3\nduration = 1.0\nvut = \"v\"\n[[roster]]\nid = \"v\"\nkind = \"background\"\nlane = \"a\"\n",
        )
        .unwrap();
        let mut log = RunLog::new(spec, map.clone(), 0.1);
        for k in 0..3 {
            let e = EntityState::on_lane("v", EntityKind::Background, &map, "a", k as f64, 10.0).unwrap();
            log.ticks.push(TickRecord {
                tick: k,
                time: k as f64 * 0.1,
                entities: [("v".to_string(), e)].into(),
                signals: BTreeMap::new(),
                delivered: vec![],
                published: vec![],
                dropped: vec![],
                aut: BTreeMap::new(),
                intensity: None,
                flags: vec![],
            });
        }
        log.events.push(EventRecord {
            tick: 1,
            event: LogEvent::Spawn { id: "v".into() },
            operator: false,
        });
        log.finish(Termination::Duration, None);
        log
    }

    #[test]
    fn jsonl_round_trip_and_order() {
        let l = log();
        let text = l.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].contains("\"type\":\"header\""));
        assert!(lines[3].contains("\"type\":\"event\""));
        assert!(lines[5].contains("\"type\":\"footer\""));
        let back = RunLog::from_jsonl(&text).unwrap();
        assert_eq!(back, l);
        assert!(back.verify());
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn tampering_breaks_the_digest() {
        let text = log().to_jsonl().replace("\"speed\":10.0", "\"speed\":10.5");
        let back = RunLog::from_jsonl(&text).unwrap();
        assert!(!back.verify());
    }

    #[test]
    fn non_increasing_ticks_are_rejected() {
        let text = log().to_jsonl();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        assert!(matches!(RunLog::from_jsonl(&lines.join("\n")), Err(LogError::Structure { .. })));
    }
}
