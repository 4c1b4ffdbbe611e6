//! The tick loop.
//!
//! One tick `k` at time `t = k·dt` runs in this order:
//!
//! 1. flow mappings made during the previous tick become visible;
//! 2. scripted events and operator commands for tick `k` are applied;
//! 3. the bus delivers everything due by `t`;
//! 4. the adversary observes the VUT, retires finished maneuvers and may
//!    start a new one;
//! 5. every entity gets its control (baseline driver, AUT, manual driver,
//!    adversarial maneuver, or none for scripted entities);
//! 6. AUT emissions, CDA session traffic and roadside messages are
//!    published;
//! 7. the tick record is written with the states from before the advance;
//! 8. the world advances by `dt`;
//! 9. collisions, completed routes, despawns and flow spawns are handled
//!    and logged against tick `k`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::aut::{AutAdapter, AutError, AutReply, BuiltinAut, Observation, Policy, TcpAut};
use super::risk::risk_field;
use super::runlog::{Delivery, EventRecord, LogEvent, RunLog, Termination, TickRecord};
use super::scenario::{AdapterKind, ControlSource, ScenarioSpec, ScriptedEvent, SpecError};
use crate::adversary::{
    maneuver_control, maneuver_options, min_ttc, select_maneuver, ActiveManeuver, AdversarialState,
};
use crate::bus::{BusError, MessageBus, MessageEnvelope, Payload, PublishOutcome};
use crate::cooperation::cda::{CdaLevel, ControlAck, ControlCommand, DecisionProposal, IntentShare, StateShare};
use crate::cooperation::warnings::{mec_warnings, Coverage};
use crate::deduction::{Initiator, TakeoverEvent};
use crate::traffic::{baseline_control, perceive, spawn_flow, DriverOptions, FlowState, IdmParams, MobilParams, TrafficFlow};
use crate::world::clock::{sample_clock_offset, ClockModel};
use crate::world::map::ScenarioMap;
use crate::world::{Control, ControlMode, EntityKind, EntityState, Pose, WorldError, WorldState};
use crate::DT;

/// Radius within which an AUT observes other entities (m).
pub const SENSING_RANGE: f64 = 150.0;
/// Ticks between roadside warning evaluations.
const WARNING_PERIOD: u64 = 10;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("scenario: {0}")]
    Spec(#[from] SpecError),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("adapter {adapter} for {vehicle}: {source}")]
    Aut {
        vehicle: String,
        adapter: String,
        #[source]
        source: AutError,
    },
    #[error("no adapter attached for {0}")]
    MissingAdapter(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(String),
    #[error("{0} is already under manual control")]
    AlreadyManual(String),
    #[error("{0} is not under manual control")]
    NotManual(String),
    #[error("{0} cannot be taken over in mode {1:?}")]
    NotAuto(String, ControlMode),
    #[error("intensity {0} outside [0, 1]")]
    BadIntensity(f64),
    #[error("session has ended")]
    Ended,
}

/// Operator commands, applied at a tick boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Takeover {
        vehicle: String,
        #[serde(default)]
        reason: String,
    },
    Release {
        vehicle: String,
    },
    SetIntensity {
        value: f64,
    },
    Pause,
    Resume,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionOptions {
    pub seed: Option<u64>,
    pub halt_on_collision: Option<bool>,
}

/// Everything that evolves during a run. Cloning it is a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub world: WorldState,
    pub bus: MessageBus,
    pub flow: TrafficFlow,
    pub flow_states: BTreeMap<String, FlowState>,
    pub params: BTreeMap<String, IdmParams>,
    pub controllers: BTreeMap<String, ControlSource>,
    pub adversary: AdversarialState,
    pub collided: BTreeSet<(String, String)>,
    pub completed: BTreeSet<String>,
    /// Next command id for cooperative control messages.
    pub next_cmd: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub state: SimState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntity {
    pub id: String,
    pub kind: EntityKind,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub control_mode: ControlMode,
}

/// What the console sees each tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub time: f64,
    pub entities: Vec<FrameEntity>,
    pub signals: BTreeMap<String, BTreeMap<String, crate::cooperation::spat::Phase>>,
    pub intensity: f64,
    pub events: Vec<LogEvent>,
    pub finished: bool,
}

/// Adapter for the AUT configured on `vehicle` in `spec`.
pub fn make_adapter(spec: &ScenarioSpec, vehicle: &str) -> Result<Box<dyn AutAdapter>, SessionError> {
    let entry = spec.roster_entry(vehicle).ok_or_else(|| SessionError::MissingAdapter(vehicle.into()))?;
    let id = entry.adapter.clone().ok_or_else(|| SessionError::MissingAdapter(vehicle.into()))?;
    let a = spec.adapter(&id).ok_or_else(|| SessionError::MissingAdapter(vehicle.into()))?;
    let err = |source| SessionError::Aut {
        vehicle: vehicle.into(),
        adapter: id.clone(),
        source,
    };
    match a.kind {
        AdapterKind::Builtin => {
            let name = a.policy.as_deref().unwrap_or_default();
            let policy = Policy::from_name(name).ok_or_else(|| err(AutError::Protocol(format!("unknown policy {name}"))))?;
            Ok(Box::new(BuiltinAut {
                policy,
                params: a.params.or(entry.params).unwrap_or_default(),
            }))
        }
        AdapterKind::Tcp => {
            let addr = a.address.as_deref().unwrap_or_default();
            let t = TcpAut::connect(addr, Duration::from_millis(a.deadline_ms)).map_err(err)?;
            Ok(Box::new(t))
        }
    }
}

/// Adapters for every AUT-controlled roster entry.
pub fn make_adapters(spec: &ScenarioSpec) -> Result<BTreeMap<String, Box<dyn AutAdapter>>, SessionError> {
    spec.roster
        .iter()
        .filter(|r| r.control == ControlSource::Aut)
        .map(|r| Ok((r.id.clone(), make_adapter(spec, &r.id)?)))
        .collect()
}

pub struct Session {
    spec: ScenarioSpec,
    map: ScenarioMap,
    state: SimState,
    log: RunLog,
    adapters: BTreeMap<String, Box<dyn AutAdapter>>,
    snapshots: Vec<(TakeoverEvent, Snapshot)>,
    termination: Option<(Termination, Option<String>)>,
    /// Vehicle whose route completion ends the run.
    focus: String,
    /// Deduction branches ignore scripted takeovers and releases.
    branch: bool,
    end_tick: Option<u64>,
    halt_on_collision: bool,
    /// Last control per AUT vehicle, held on timeouts.
    held: BTreeMap<String, AutReply>,
}

impl Session {
    /// Session with adapters built from the scenario.
    pub fn new(spec: ScenarioSpec, map: ScenarioMap, opts: SessionOptions) -> Result<Self, SessionError> {
        let adapters = make_adapters(&spec)?;
        Self::with_adapters(spec, map, opts, adapters)
    }

    pub fn with_adapters(
        mut spec: ScenarioSpec,
        map: ScenarioMap,
        opts: SessionOptions,
        adapters: BTreeMap<String, Box<dyn AutAdapter>>,
    ) -> Result<Self, SessionError> {
        if let Some(seed) = opts.seed {
            spec.seed = seed;
        }
        if let Some(h) = opts.halt_on_collision {
            spec.halt_on_collision = h;
        }
        spec.validate_against(&map)?;
        let mut world = WorldState::new(spec.seed, DT);
        world.signal_plans = map.signals.iter().map(|p| (p.id.clone(), p.clone())).collect();
        world.refresh_signals();
        let mut flow = TrafficFlow::default();
        let mut params = BTreeMap::new();
        let mut controllers = BTreeMap::new();
        for r in &spec.roster {
            let mut e = match &r.lane {
                Some(l) => EntityState::on_lane(&r.id, r.kind, &map, l, r.station, r.speed)?,
                None => {
                    let [x, y, h] = r.pose.unwrap_or_default();
                    EntityState::free(&r.id, r.kind, Pose::new(x, y, h), r.speed)
                }
            };
            e.route = r.route.clone();
            e.accel = r.accel;
            e.adversarial_eligible = r.adversarial;
            e.length = r.length.unwrap_or(e.length);
            e.width = r.width.unwrap_or(e.width);
            e.control_mode = match r.control {
                ControlSource::Baseline | ControlSource::Aut => ControlMode::Auto,
                ControlSource::Console => ControlMode::Manual,
                ControlSource::Scripted => ControlMode::Scripted,
            };
            if r.kind != EntityKind::Background {
                flow.map_external(&e).expect("roster ids are unique");
            }
            if let Some(mode) = r.clock {
                let mut c = ClockModel::new(mode);
                sample_clock_offset(&mut c, &mut world.rng.clock);
                world.clocks.insert(r.id.clone(), c);
            }
            params.insert(r.id.clone(), r.params.unwrap_or_default());
            controllers.insert(r.id.clone(), r.control);
            world.spawn(e)?;
        }
        let bus = MessageBus::new(spec.channels.clone())?;
        let adversary = AdversarialState::new(&spec.adversary);
        let flow_states = spec.flows.iter().map(|f| (f.id.clone(), FlowState::default())).collect();
        let state = SimState {
            world,
            bus,
            flow,
            flow_states,
            params,
            controllers,
            adversary,
            collided: BTreeSet::new(),
            completed: BTreeSet::new(),
            next_cmd: 0,
        };
        let mut s = Self::assemble(spec, map, state, adapters, false);
        s.handshake_all()?;
        Ok(s)
    }

    fn assemble(
        spec: ScenarioSpec,
        map: ScenarioMap,
        state: SimState,
        adapters: BTreeMap<String, Box<dyn AutAdapter>>,
        branch: bool,
    ) -> Self {
        let log = RunLog::new(spec.clone(), map.clone(), DT);
        Self {
            focus: spec.vut.clone(),
            halt_on_collision: spec.halt_on_collision,
            spec,
            map,
            state,
            log,
            adapters,
            snapshots: Vec::new(),
            termination: None,
            branch,
            end_tick: None,
            held: BTreeMap::new(),
        }
    }

    /// A deduction branch from `snap`, with `focus` completing its route or
    /// `horizon` seconds elapsing ending the branch.
    pub fn fork(
        spec: ScenarioSpec,
        map: ScenarioMap,
        snap: &Snapshot,
        focus: &str,
        horizon: f64,
        adapters: BTreeMap<String, Box<dyn AutAdapter>>,
    ) -> Result<Self, SessionError> {
        let mut s = Self::assemble(spec, map, snap.state.clone(), adapters, true);
        s.focus = focus.to_string();
        s.end_tick = Some(snap.tick + (horizon / DT).round() as u64);
        s.handshake_all()?;
        Ok(s)
    }

    fn handshake_all(&mut self) -> Result<(), SessionError> {
        for (id, c) in &self.state.controllers {
            if *c == ControlSource::Aut && !self.adapters.contains_key(id) {
                return Err(SessionError::MissingAdapter(id.clone()));
            }
        }
        for (vehicle, a) in self.adapters.iter_mut() {
            a.handshake(vehicle).map_err(|source| SessionError::Aut {
                vehicle: vehicle.clone(),
                adapter: a.algorithm(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn map(&self) -> &ScenarioMap {
        &self.map
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn world(&self) -> &WorldState {
        &self.state.world
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.state.world.tick,
            state: self.state.clone(),
        }
    }

    /// Snapshots taken at takeovers, in order.
    pub fn takeovers(&self) -> &[(TakeoverEvent, Snapshot)] {
        &self.snapshots
    }

    pub fn is_finished(&self) -> bool {
        self.termination.is_some()
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination.as_ref().map(|t| t.0)
    }

    fn event(&mut self, event: LogEvent, operator: bool) {
        self.log.events.push(EventRecord {
            tick: self.state.world.tick,
            event,
            operator,
        });
    }

    /// Apply an operator command before the next tick.
    pub fn apply_command(&mut self, cmd: Command) -> Result<(), CommandError> {
        if self.is_finished() {
            return Err(CommandError::Ended);
        }
        match cmd {
            Command::Takeover { vehicle, reason } => self.takeover(&vehicle, Initiator::Operator, reason).map(|_| ()),
            Command::Release { vehicle } => self.release(&vehicle, true),
            Command::SetIntensity { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(CommandError::BadIntensity(value));
                }
                self.state.adversary.intensity = value;
                self.event(LogEvent::SetIntensity { value }, true);
                Ok(())
            }
            Command::Pause => {
                self.event(LogEvent::Pause, true);
                Ok(())
            }
            Command::Resume => {
                self.event(LogEvent::Resume, true);
                Ok(())
            }
        }
    }

    /// Hand `vehicle` to the human driver. The returned snapshot is the
    /// state just before the switch.
    pub fn takeover(&mut self, vehicle: &str, initiator: Initiator, reason: String) -> Result<Snapshot, CommandError> {
        let e = self
            .state
            .world
            .entities
            .get(vehicle)
            .filter(|e| e.kind.is_vehicle())
            .ok_or_else(|| CommandError::UnknownVehicle(vehicle.into()))?;
        match e.control_mode {
            ControlMode::Auto => {}
            ControlMode::Manual => return Err(CommandError::AlreadyManual(vehicle.into())),
            m => return Err(CommandError::NotAuto(vehicle.into(), m)),
        }
        let snap = self.snapshot();
        self.state.world.entities.get_mut(vehicle).unwrap().control_mode = ControlMode::Manual;
        let ev = TakeoverEvent {
            vehicle: vehicle.to_string(),
            tick: snap.tick,
            initiator,
            reason,
        };
        self.event(LogEvent::Takeover(ev.clone()), initiator == Initiator::Operator);
        self.snapshots.push((ev, snap.clone()));
        Ok(snap)
    }

    pub fn release(&mut self, vehicle: &str, operator: bool) -> Result<(), CommandError> {
        let e = self
            .state
            .world
            .entities
            .get_mut(vehicle)
            .filter(|e| e.kind.is_vehicle())
            .ok_or_else(|| CommandError::UnknownVehicle(vehicle.into()))?;
        if e.control_mode != ControlMode::Manual {
            return Err(CommandError::NotManual(vehicle.into()));
        }
        e.control_mode = ControlMode::Auto;
        self.event(
            LogEvent::Release {
                vehicle: vehicle.to_string(),
            },
            operator,
        );
        Ok(())
    }

    fn apply_scripted(&mut self, k: u64) {
        let due: Vec<ScriptedEvent> = self.spec.events.iter().filter(|e| e.tick() == k).cloned().collect();
        for ev in due {
            match ev {
                ScriptedEvent::Takeover { vehicle, reason, .. } if !self.branch => {
                    let _ = self.takeover(&vehicle, Initiator::Scripted, reason);
                }
                ScriptedEvent::Release { vehicle, .. } if !self.branch => {
                    let _ = self.release(&vehicle, false);
                }
                ScriptedEvent::Takeover { .. } | ScriptedEvent::Release { .. } => {}
                ScriptedEvent::SignalStage { signal, stage, .. } => {
                    let now = self.state.world.sim_time();
                    if let Some(p) = self.state.world.signal_plans.get_mut(&signal) {
                        let into: f64 = p.stages[..stage].iter().map(|s| s.duration).sum();
                        p.offset = (now - into).rem_euclid(p.cycle_length());
                        self.state.world.refresh_signals();
                        self.event(LogEvent::SignalStage { signal, stage }, false);
                    }
                }
                ScriptedEvent::SetIntensity { value, .. } => {
                    self.state.adversary.intensity = value;
                    self.event(LogEvent::SetIntensity { value }, false);
                }
            }
        }
    }

    pub fn frame(&self) -> StateFrame {
        let w = &self.state.world;
        StateFrame {
            tick: w.tick,
            time: w.sim_time(),
            entities: w
                .entities
                .values()
                .map(|e| FrameEntity {
                    id: e.id.clone(),
                    kind: e.kind,
                    x: e.pose.x,
                    y: e.pose.y,
                    heading: e.pose.heading,
                    speed: e.speed,
                    length: e.length,
                    width: e.width,
                    control_mode: e.control_mode,
                })
                .collect(),
            signals: signal_phases(w),
            intensity: self.state.adversary.intensity,
            events: self
                .log
                .events
                .iter()
                .filter(|e| e.tick + 1 >= w.tick)
                .map(|e| e.event.clone())
                .collect(),
            finished: self.is_finished(),
        }
    }

    fn update_adversary(&mut self, events: &mut Vec<LogEvent>) {
        let cfg = self.spec.adversary.clone();
        if !cfg.enabled {
            return;
        }
        let st = &mut self.state;
        let Some(vut) = st.world.entities.get(&self.spec.vut) else { return };
        let m = min_ttc(&st.world.entities, vut, cfg.horizon, cfg.d_col);
        st.adversary.observe(m, &cfg);

        let done: Vec<String> = st
            .adversary
            .active
            .iter()
            .filter(|(id, a)| {
                a.elapsed >= a.maneuver.duration - 1e-9 || st.world.entities.get(*id).is_none_or(|e| e.finished)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in done {
            st.adversary.active.remove(&id);
            if let Some(e) = st.world.entities.get_mut(&id) {
                if e.control_mode == ControlMode::Adversarial {
                    e.control_mode = ControlMode::Auto;
                    e.lateral_target = 0.0;
                }
            }
            events.push(LogEvent::ManeuverEnd { vehicle: id });
        }

        if st.world.tick % cfg.select_period != 0 || !st.adversary.active.is_empty() {
            return;
        }
        let vut = &st.world.entities[&self.spec.vut];
        let eligible: Vec<&EntityState> = st
            .world
            .entities
            .values()
            .filter(|e| {
                e.adversarial_eligible
                    && !e.finished
                    && e.id != vut.id
                    && e.control_mode == ControlMode::Auto
                    && e.lane.is_some()
                    && e.pose.distance(&vut.pose) <= cfg.interaction_range
            })
            .collect();
        if eligible.is_empty() {
            return;
        }
        let field = risk_field(&st.world, &self.map, &vut.id, 1.0);
        let candidates: BTreeMap<String, f64> = eligible
            .iter()
            .map(|e| (e.id.clone(), field.contributions.get(&e.id).copied().unwrap_or(0.0)))
            .collect();
        let intensity = st.adversary.intensity;
        if let Some((target, maneuver)) = select_maneuver(intensity, self.spec.class, &candidates, &mut st.world.rng.adversary) {
            st.adversary.active.insert(
                target.clone(),
                ActiveManeuver {
                    maneuver,
                    started_tick: st.world.tick,
                    elapsed: 0.0,
                },
            );
            st.world.entities.get_mut(&target).unwrap().control_mode = ControlMode::Adversarial;
            events.push(LogEvent::ManeuverStart {
                vehicle: target,
                maneuver,
            });
        }
    }

    fn observation(&self, id: &str, inbox: &BTreeMap<String, Vec<MessageEnvelope>>) -> Observation {
        let w = &self.state.world;
        let ego = w.entities[id].clone();
        let params = self.state.params.get(id).copied().unwrap_or_default();
        Observation {
            tick: w.tick,
            time: w.sim_time(),
            neighbors: w
                .entities
                .values()
                .filter(|o| o.id != id && o.pose.distance(&ego.pose) <= SENSING_RANGE)
                .cloned()
                .collect(),
            perception: perceive(w, &self.map, id, &params, &|_| true),
            messages: inbox.get(id).cloned().unwrap_or_default(),
            ego,
        }
    }

    /// Controls for this tick, plus AUT replies, emissions and events.
    fn compute_controls(
        &mut self,
        inbox: &BTreeMap<String, Vec<MessageEnvelope>>,
        events: &mut Vec<LogEvent>,
        flags: &mut Vec<String>,
    ) -> (BTreeMap<String, Control>, BTreeMap<String, AutReply>) {
        let mut controls = BTreeMap::new();
        let mut replies = BTreeMap::new();
        let ids: Vec<String> = self.state.world.entities.keys().cloned().collect();
        let mobil = MobilParams::default();
        for id in ids {
            let st = &self.state;
            let e = &st.world.entities[&id];
            if e.finished || e.kind == EntityKind::Rsu {
                continue;
            }
            let params = st.params.get(&id).copied().unwrap_or_default();
            let background = e.kind == EntityKind::Background;
            let flow = &st.flow;
            let visible = |o: &EntityState| !background || flow.visible_to_background(o);
            let control = match e.control_mode {
                ControlMode::Scripted => continue,
                ControlMode::Manual => {
                    let cautious = DriverOptions {
                        yield_all: true,
                        lane_changes: false,
                        ..DriverOptions::default()
                    };
                    baseline_control(&st.world, &self.map, &id, &params, &mobil, &cautious, &visible)
                }
                ControlMode::Adversarial => match st.adversary.active.get(&id) {
                    Some(am) => {
                        let opts = maneuver_options(&am.maneuver);
                        let base = baseline_control(&st.world, &self.map, &id, &params, &mobil, &opts, &visible);
                        let vut = st.world.entities.get(&self.spec.vut);
                        maneuver_control(am, e, vut, &self.map, base)
                    }
                    None => baseline_control(&st.world, &self.map, &id, &params, &mobil, &DriverOptions::default(), &visible),
                },
                ControlMode::Auto => match st.controllers.get(&id).copied().unwrap_or_default() {
                    ControlSource::Aut => {
                        let obs = self.observation(&id, inbox);
                        let result = match self.adapters.get_mut(&id) {
                            Some(a) => a.step(&obs),
                            None => Err(AutError::Closed),
                        };
                        let reply = match result {
                            Ok(r) => {
                                self.held.insert(id.clone(), r.clone());
                                r
                            }
                            Err(err) => {
                                if err == AutError::Timeout {
                                    flags.push(format!("aut_timeout:{id}"));
                                    events.push(LogEvent::AutTimeout { vehicle: id.clone() });
                                } else {
                                    flags.push(format!("aut_error:{id}"));
                                    events.push(LogEvent::AutError {
                                        vehicle: id.clone(),
                                        detail: err.to_string(),
                                    });
                                }
                                let prev = self.held.get(&id);
                                let e = &self.state.world.entities[&id];
                                AutReply {
                                    tick: obs.tick,
                                    accel: prev.map_or(e.accel, |p| p.accel),
                                    intent: crate::world::LaneIntent::Keep,
                                    lateral: None,
                                    emit: Vec::new(),
                                }
                            }
                        };
                        let c = Control {
                            accel: reply.accel,
                            intent: reply.intent,
                            lateral: reply.lateral,
                        };
                        replies.insert(id.clone(), reply);
                        c
                    }
                    _ => baseline_control(&st.world, &self.map, &id, &params, &mobil, &DriverOptions::default(), &visible),
                },
            };
            controls.insert(id, control);
        }
        for am in self.state.adversary.active.values_mut() {
            am.elapsed += DT;
        }
        (controls, replies)
    }

    /// Messages generated by the platform itself this tick.
    fn platform_messages(&mut self, inbox: &BTreeMap<String, Vec<MessageEnvelope>>) -> Vec<(String, String, Payload)> {
        let mut out = Vec::new();
        let w = &self.state.world;
        let now = w.sim_time();
        let k = w.tick;
        for s in &self.spec.sessions {
            if now < s.start - 1e-9 || now > s.end + 1e-9 {
                continue;
            }
            let first = ((now - DT) < s.start - 1e-9) && now >= s.start - 1e-9;
            let present: Vec<&EntityState> = s
                .participants
                .iter()
                .filter_map(|p| w.entities.get(p))
                .filter(|e| !e.finished)
                .collect();
            for e in &present {
                out.push((
                    "v2x".to_string(),
                    e.id.clone(),
                    Payload::StateShare(StateShare {
                        id: e.id.clone(),
                        x: e.pose.x,
                        y: e.pose.y,
                        heading: e.pose.heading,
                        speed: e.speed,
                        accel: e.accel,
                        lane: e.lane.clone(),
                        session: Some(s.id.clone()),
                    }),
                ));
            }
            if first && s.level >= CdaLevel::IntentSharing {
                for e in &present {
                    out.push((
                        "v2x".into(),
                        e.id.clone(),
                        Payload::IntentShare(IntentShare {
                            session: s.id.clone(),
                            vehicle: e.id.clone(),
                            maneuver: "proceed".into(),
                            target_gap: 0.0,
                            conflict: None,
                        }),
                    ));
                }
            }
            if first && s.level >= CdaLevel::CoopDecision {
                let order = s.participants.clone();
                for e in &present {
                    out.push((
                        "v2x".into(),
                        e.id.clone(),
                        Payload::DecisionProposal(DecisionProposal {
                            session: s.id.clone(),
                            proposer: e.id.clone(),
                            order: order.clone(),
                            action: "pass_in_order".into(),
                        }),
                    ));
                }
            }
            if first && s.level == CdaLevel::CoopControl {
                if let Some(lead) = present.first() {
                    for e in &present[1..] {
                        let cmd_id = self.state.next_cmd;
                        self.state.next_cmd += 1;
                        out.push((
                            "v2x".into(),
                            lead.id.clone(),
                            Payload::ControlCommand(ControlCommand {
                                session: s.id.clone(),
                                cmd_id,
                                target: e.id.clone(),
                                accel: e.accel,
                                valid_from: now,
                                valid_until: (now + 1.0).min(s.end),
                            }),
                        ));
                    }
                }
            }
        }
        // Commands addressed to a vehicle are acknowledged on arrival.
        for (who, msgs) in inbox {
            for m in msgs {
                if let Payload::ControlCommand(c) = &m.payload {
                    if &c.target == who {
                        out.push((
                            "v2x".into(),
                            who.clone(),
                            Payload::ControlAck(ControlAck {
                                session: c.session.clone(),
                                cmd_id: c.cmd_id,
                                vehicle: who.clone(),
                            }),
                        ));
                    }
                }
            }
        }
        let w = &self.state.world;
        for rsu in w.entities.values().filter(|e| e.kind == EntityKind::Rsu) {
            for spat in w.signal_state.values() {
                out.push(("rsu".into(), rsu.id.clone(), Payload::Spat(spat.clone())));
            }
            let range = self.spec.roster_entry(&rsu.id).and_then(|r| r.coverage);
            let vut = w.entities.get(&self.spec.vut);
            if let (Some(range), Some(vut)) = (range, vut) {
                if k % WARNING_PERIOD == 0 {
                    let cov = Coverage {
                        center: [rsu.pose.x, rsu.pose.y],
                        range,
                    };
                    let cfg = self.spec.warnings.unwrap_or_default();
                    for warning in mec_warnings(w, &self.map, &cov, vut, &cfg) {
                        out.push(("rsu".into(), rsu.id.clone(), Payload::Warning(warning)));
                    }
                }
            }
        }
        out
    }

    /// Run one tick.
    pub fn step(&mut self) -> Result<(), SessionError> {
        if self.is_finished() {
            return Ok(());
        }
        let k = self.state.world.tick;
        let now = self.state.world.sim_time();
        self.state.flow.begin_tick();
        self.apply_scripted(k);

        let due = self.state.bus.deliver_due(now);
        let mut delivered = Vec::with_capacity(due.len());
        let mut inbox: BTreeMap<String, Vec<MessageEnvelope>> = BTreeMap::new();
        for env in due {
            let cands = self
                .state
                .world
                .entities
                .values()
                .filter(|e| !e.finished)
                .map(|e| (e.id.as_str(), &e.pose));
            let recipients = self.state.bus.recipients(&env, cands);
            for r in &recipients {
                inbox.entry(r.clone()).or_default().push(env.clone());
            }
            delivered.push(Delivery { envelope: env, recipients });
        }

        let mut events = Vec::new();
        let mut flags = Vec::new();
        self.update_adversary(&mut events);
        let (controls, replies) = self.compute_controls(&inbox, &mut events, &mut flags);

        let mut outgoing: Vec<(String, String, Payload)> = Vec::new();
        for (id, r) in &replies {
            for em in &r.emit {
                outgoing.push((em.channel.clone(), id.clone(), em.payload.clone()));
            }
        }
        outgoing.extend(self.platform_messages(&inbox));
        let mut published = Vec::new();
        let mut dropped = Vec::new();
        for (channel, sender, payload) in outgoing {
            let st = &mut self.state;
            let Some(e) = st.world.entities.get(&sender) else { continue };
            if st.bus.channel(&channel).is_none() {
                flags.push(format!("unknown_channel:{sender}:{channel}"));
                continue;
            }
            let offset = st.world.clocks.get(&sender).map_or(0.0, |c| c.node_offset);
            let pose = e.pose;
            match st.bus.publish(&channel, &sender, payload, now, &pose, offset, &mut st.world.rng.bus)? {
                PublishOutcome::Queued(env) => published.push(env),
                PublishOutcome::Dropped(env) => dropped.push(env),
            }
        }

        self.log.ticks.push(TickRecord {
            tick: k,
            time: now,
            entities: self.state.world.entities.clone(),
            signals: signal_phases(&self.state.world),
            delivered,
            published,
            dropped,
            aut: replies,
            intensity: self.spec.adversary.enabled.then_some(self.state.adversary.intensity),
            flags,
        });
        for e in events {
            self.event(e, false);
        }

        self.state.world.advance_tick(&self.map, &controls, DT)?;
        self.post_advance(k)
    }

    fn post_advance(&mut self, k: u64) -> Result<(), SessionError> {
        let mut events = Vec::new();
        let mut halt = None;
        for (a, b) in self.state.world.collisions() {
            if self.state.collided.insert((a.clone(), b.clone())) {
                events.push(LogEvent::Collision { a: a.clone(), b: b.clone() });
                if self.halt_on_collision {
                    halt = Some((Termination::Collision, Some(format!("{a} and {b} collided"))));
                }
            }
        }
        let finished: Vec<String> = self
            .state
            .world
            .entities
            .values()
            .filter(|e| e.finished && !self.state.completed.contains(&e.id))
            .map(|e| e.id.clone())
            .collect();
        for id in finished {
            self.state.completed.insert(id.clone());
            let kind = self.state.world.entities[&id].kind;
            if kind == EntityKind::Background && self.spec.roster_entry(&id).is_none() {
                self.state.world.despawn(&id);
                self.state.flow.unmap(&id);
                self.state.flow.despawned += 1;
                self.state.params.remove(&id);
                self.state.controllers.remove(&id);
                self.state.adversary.active.remove(&id);
                events.push(LogEvent::Despawn { id });
            } else {
                events.push(LogEvent::RouteComplete { vehicle: id.clone() });
                if id == self.focus && self.spec.stop_on_completion && halt.is_none() {
                    halt = Some((Termination::RouteComplete, None));
                }
            }
        }
        let now = self.state.world.sim_time();
        for spec in &self.spec.flows {
            // Measured on the lane geometry so that vehicles changing out of
            // the entry lane still block it.
            let entry_gap = self.map.lane(&spec.lane).and_then(|lane| {
                self.state
                    .world
                    .entities
                    .values()
                    .filter(|e| !e.finished && e.kind.is_vehicle())
                    .filter_map(|e| {
                        let (s, lat) = lane.project(e.pose.x, e.pose.y);
                        (lat.abs() < (lane.width + e.width) / 2.0).then(|| s - e.length / 2.0)
                    })
                    .reduce(f64::min)
            });
            let fs = self.state.flow_states.get_mut(&spec.id).expect("flow state exists");
            if let Some(e) = spawn_flow(spec, fs, &self.map, now, entry_gap, &mut self.state.world.rng.flow)? {
                let id = e.id.clone();
                self.state.params.insert(id.clone(), spec.params);
                self.state.controllers.insert(id.clone(), ControlSource::Baseline);
                self.state.flow.spawned += 1;
                if e.kind != EntityKind::Background {
                    let _ = self.state.flow.map_external(&e);
                }
                self.state.world.spawn(e)?;
                events.push(LogEvent::Spawn { id });
            }
        }
        for e in events {
            self.log.events.push(EventRecord {
                tick: k,
                event: e,
                operator: false,
            });
        }
        if halt.is_none() {
            let t = self.state.world.tick;
            if self.end_tick.is_some_and(|end| t >= end) {
                halt = Some((Termination::Horizon, None));
            } else if t as f64 * DT >= self.spec.duration - 1e-9 {
                halt = Some((Termination::Duration, None));
            }
        }
        if let Some(h) = halt {
            self.termination = Some(h);
        }
        Ok(())
    }

    /// Stop the run early.
    pub fn abort(&mut self, reason: &str) {
        if self.termination.is_none() {
            self.termination = Some((Termination::Aborted, Some(reason.to_string())));
        }
    }

    /// Close adapters and return the finished log.
    pub fn finish(mut self) -> RunLog {
        for a in self.adapters.values_mut() {
            a.close();
        }
        let (t, detail) = self.termination.take().unwrap_or((Termination::Aborted, Some("not finished".into())));
        self.log.finish(t, detail);
        self.log
    }

    /// Run to termination.
    pub fn run(mut self) -> Result<RunLog, SessionError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.finish())
    }

    /// Like [`run`](Self::run) but also returns the takeover snapshots.
    pub fn run_with_takeovers(mut self) -> Result<(RunLog, Vec<(TakeoverEvent, Snapshot)>), SessionError> {
        while !self.is_finished() {
            self.step()?;
        }
        let snaps = std::mem::take(&mut self.snapshots);
        Ok((self.finish(), snaps))
    }
}

fn signal_phases(w: &WorldState) -> BTreeMap<String, BTreeMap<String, crate::cooperation::spat::Phase>> {
    w.signal_state.iter().map(|(id, s)| (id.clone(), s.phases.clone())).collect()
}

/// Run a spec with adapters built from it.
pub fn run(spec: ScenarioSpec, map: ScenarioMap, opts: SessionOptions) -> Result<RunLog, SessionError> {
    Session::new(spec, map, opts)?.run()
}

/// Adapter that returns recorded replies.
struct ReplayAut {
    vehicle: String,
    replies: BTreeMap<u64, AutReply>,
    errors: BTreeMap<u64, String>,
}

impl AutAdapter for ReplayAut {
    fn handshake(&mut self, _vehicle: &str) -> Result<(), AutError> {
        Ok(())
    }

    fn step(&mut self, obs: &Observation) -> Result<AutReply, AutError> {
        if let Some(d) = self.errors.get(&obs.tick) {
            return Err(AutError::Replayed(d.clone()));
        }
        self.replies.get(&obs.tick).cloned().ok_or(AutError::Timeout)
    }

    fn algorithm(&self) -> String {
        format!("replay-{}", self.vehicle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub identical: bool,
    pub digest_ok: bool,
    /// First differing line (1-based) of the two logs.
    pub first_difference: Option<usize>,
    pub ticks: usize,
}

/// Re-simulate a log from its header, feeding recorded AUT replies and
/// operator commands back in, and compare the result line by line.
pub fn replay(log: &RunLog) -> Result<ReplayReport, SessionError> {
    let spec = log.header.spec.clone();
    let map = log.header.map.clone();
    let mut adapters: BTreeMap<String, Box<dyn AutAdapter>> = BTreeMap::new();
    for r in spec.roster.iter().filter(|r| r.control == ControlSource::Aut) {
        let replies = log
            .ticks
            .iter()
            .filter_map(|t| t.aut.get(&r.id).map(|a| (t.tick, a.clone())))
            .filter(|(t, _)| !log.events_at(*t).any(|e| matches!(&e.event, LogEvent::AutTimeout { vehicle } | LogEvent::AutError { vehicle, .. } if vehicle == &r.id)))
            .collect();
        let errors = log
            .events
            .iter()
            .filter_map(|e| match &e.event {
                LogEvent::AutError { vehicle, detail } if vehicle == &r.id => Some((e.tick, detail.clone())),
                _ => None,
            })
            .collect();
        adapters.insert(
            r.id.clone(),
            Box::new(ReplayAut {
                vehicle: r.id.clone(),
                replies,
                errors,
            }),
        );
    }
    let mut s = Session::with_adapters(spec, map, SessionOptions::default(), adapters)?;
    let commands: Vec<&EventRecord> = log.events.iter().filter(|e| e.operator).collect();
    let mut next = 0;
    let limit = log.ticks.last().map_or(0, |t| t.tick + 1);
    while !s.is_finished() && s.world().tick < limit.max(1) {
        let k = s.world().tick;
        while next < commands.len() && commands[next].tick == k {
            let cmd = match &commands[next].event {
                LogEvent::Takeover(t) => Command::Takeover {
                    vehicle: t.vehicle.clone(),
                    reason: t.reason.clone(),
                },
                LogEvent::Release { vehicle } => Command::Release { vehicle: vehicle.clone() },
                LogEvent::SetIntensity { value } => Command::SetIntensity { value: *value },
                LogEvent::Pause => Command::Pause,
                LogEvent::Resume => Command::Resume,
                _ => unreachable!("only operator commands are flagged"),
            };
            let _ = s.apply_command(cmd);
            next += 1;
        }
        s.step()?;
    }
    if !s.is_finished() {
        if let Some(f) = &log.footer {
            s.termination = Some((f.termination, f.detail.clone()));
        }
    }
    let again = s.finish();
    let (a, b) = (log.to_jsonl(), again.to_jsonl());
    let first_difference = a
        .lines()
        .zip(b.lines())
        .position(|(x, y)| x != y)
        .or_else(|| (a.lines().count() != b.lines().count()).then(|| a.lines().count().min(b.lines().count())))
        .map(|i| i + 1);
    Ok(ReplayReport {
        identical: first_difference.is_none(),
        digest_ok: log.verify(),
        first_difference,
        ticks: again.ticks.len(),
    })
}
