//! Cooperative driving automation (CDA) sessions: message bodies for the
//! four cooperation levels, the priority-order consensus check, and the
//! per-level session validator.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{MessageEnvelope, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdaLevel {
    StateSharing,
    IntentSharing,
    CoopDecision,
    CoopControl,
}

/// Kinematic digest of a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateShare {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentShare {
    pub session: String,
    pub vehicle: String,
    pub maneuver: String,
    /// Gap the vehicle intends to take or leave, in seconds.
    #[serde(default)]
    pub target_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<String>,
}

/// A proposed passing order: `order[i]` goes before `order[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionProposal {
    pub session: String,
    pub proposer: String,
    pub order: Vec<String>,
    #[serde(default)]
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub session: String,
    pub cmd_id: u64,
    pub target: String,
    pub accel: f64,
    pub valid_from: f64,
    pub valid_until: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAck {
    pub session: String,
    pub cmd_id: u64,
    pub vehicle: String,
}

/// A CDA message as exchanged by participants: the level tag and a body
/// that must match it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdaMessage {
    pub level: CdaLevel,
    pub body: Payload,
}

impl CdaMessage {
    pub fn is_consistent(&self) -> bool {
        self.body.cda_level() == Some(self.level)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CdaError {
    #[error("unknown cooperation session {0}")]
    UnknownSession(String),
    #[error("message level does not match its body")]
    LevelMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Consensus {
    /// Agreed passing order.
    Order(Vec<String>),
    /// Vehicles on a shortest precedence cycle.
    Conflict(BTreeSet<String>),
}

/// Merge the precedences of all proposals. Returns the lexicographically
/// smallest order respecting all of them, or the vertices of a shortest
/// cycle when they contradict each other.
pub fn consensus_check(proposals: &[DecisionProposal]) -> Consensus {
    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in proposals {
        for v in &p.order {
            succ.entry(v).or_default();
        }
        for w in p.order.windows(2) {
            if w[0] != w[1] {
                succ.entry(&w[0]).or_default().insert(&w[1]);
            } else {
                // Self-precedence is a cycle of length one.
                return Consensus::Conflict(BTreeSet::from([w[0].clone()]));
            }
        }
    }
    let mut indeg: BTreeMap<&str, usize> = succ.keys().map(|&k| (k, 0)).collect();
    for outs in succ.values() {
        for &o in outs {
            *indeg.get_mut(o).unwrap() += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<&str>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&k, _)| Reverse(k))
        .collect();
    let mut order = Vec::with_capacity(succ.len());
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v.to_string());
        for &o in &succ[v] {
            let d = indeg.get_mut(o).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(o));
            }
        }
    }
    if order.len() == succ.len() {
        return Consensus::Order(order);
    }
    Consensus::Conflict(shortest_cycle(&succ))
}

fn shortest_cycle(succ: &BTreeMap<&str, BTreeSet<&str>>) -> BTreeSet<String> {
    let mut best: Option<Vec<&str>> = None;
    for &start in succ.keys() {
        // BFS from start back to itself.
        let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = VecDeque::from([start]);
        let mut found = false;
        while let Some(v) = queue.pop_front() {
            for &o in &succ[v] {
                if o == start {
                    prev.insert(start, v);
                    found = true;
                    break;
                }
                if !prev.contains_key(o) {
                    prev.insert(o, v);
                    queue.push_back(o);
                }
            }
            if found {
                break;
            }
        }
        if !found {
            continue;
        }
        let mut cycle = vec![start];
        let mut cur = prev[start];
        while cur != start {
            cycle.push(cur);
            cur = prev[cur];
        }
        if best.as_ref().is_none_or(|b| cycle.len() < b.len()) {
            best = Some(cycle);
        }
    }
    best.unwrap_or_default().into_iter().map(str::to_string).collect()
}

/// Two participants whose paths conflict, with the time each enters the
/// conflict zone (if it does).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_b: Option<f64>,
}

impl ConflictPair {
    fn first_entry(&self) -> Option<f64> {
        match (self.entry_a, self.entry_b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdaSession {
    pub id: String,
    pub level: CdaLevel,
    pub participants: Vec<String>,
    pub start: f64,
    pub end: f64,
    /// Minimum state publication rate in Hz.
    #[serde(default = "default_rate")]
    pub min_rate: f64,
    /// Maximum acceptable delivery latency in seconds.
    #[serde(default = "default_latency_bound")]
    pub latency_bound: f64,
    #[serde(default)]
    pub conflicts: Vec<ConflictPair>,
}

fn default_rate() -> f64 {
    10.0
}

fn default_latency_bound() -> f64 {
    0.2
}

pub fn find_session<'a>(sessions: &'a [CdaSession], id: &str) -> Result<&'a CdaSession, CdaError> {
    sessions
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CdaError::UnknownSession(id.to_string()))
}

/// One published message and whether the bus delivered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub envelope: MessageEnvelope,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVerdict {
    pub session: String,
    pub level: CdaLevel,
    pub pass: bool,
    pub violations: Vec<Violation>,
}

/// Slack on the inter-message gap, absorbing float noise in send times.
const GAP_EPS: f64 = 1e-6;

/// Check a session trace against the requirements of the session's level.
///
/// Only loss can be injected into a trace, and every rule is phrased so that
/// losing a message can add violations but never remove one.
pub fn validate_cda_session(trace: &[TraceEntry], session: &CdaSession) -> SessionVerdict {
    let mut v = Vec::new();
    match session.level {
        CdaLevel::StateSharing => check_state_sharing(trace, session, &mut v),
        CdaLevel::IntentSharing => check_intent_sharing(trace, session, &mut v),
        CdaLevel::CoopDecision => check_decision(trace, session, &mut v),
        CdaLevel::CoopControl => check_control(trace, session, &mut v),
    }
    SessionVerdict {
        session: session.id.clone(),
        level: session.level,
        pass: v.is_empty(),
        violations: v,
    }
}

fn violation(out: &mut Vec<Violation>, rule: &str, detail: String) {
    out.push(Violation {
        rule: rule.to_string(),
        detail,
    });
}

fn in_session(p: &Payload, s: &CdaSession) -> bool {
    p.session() == Some(s.id.as_str())
}

fn check_state_sharing(trace: &[TraceEntry], s: &CdaSession, out: &mut Vec<Violation>) {
    let period = 1.0 / s.min_rate;
    for who in &s.participants {
        let mut times: Vec<f64> = Vec::new();
        for t in trace {
            let e = &t.envelope;
            let Payload::StateShare(st) = &e.payload else { continue };
            if st.id != *who || e.sent_at < s.start - GAP_EPS || e.sent_at > s.end + GAP_EPS {
                continue;
            }
            if !t.delivered {
                continue;
            }
            if e.latency() > s.latency_bound + GAP_EPS {
                violation(
                    out,
                    "state_latency",
                    format!("{who} seq {} latency {:.3} s exceeds {:.3} s", e.seq, e.latency(), s.latency_bound),
                );
            }
            times.push(e.sent_at);
        }
        times.sort_by(f64::total_cmp);
        let mut prev = s.start;
        let mut worst: f64 = 0.0;
        for &t in times.iter().chain(std::iter::once(&s.end)) {
            worst = worst.max(t - prev);
            prev = t;
        }
        if times.is_empty() || worst > period + GAP_EPS {
            violation(
                out,
                "state_rate",
                format!("{who} longest gap between delivered states {worst:.3} s exceeds {period:.3} s"),
            );
        }
    }
}

fn check_intent_sharing(trace: &[TraceEntry], s: &CdaSession, out: &mut Vec<Violation>) {
    for c in &s.conflicts {
        let Some(deadline) = c.first_entry() else { continue };
        for who in [&c.a, &c.b] {
            let ok = trace.iter().any(|t| {
                t.delivered
                    && t.envelope.deliver_ts <= deadline
                    && matches!(&t.envelope.payload, Payload::IntentShare(i) if i.vehicle == *who && i.session == s.id)
            });
            if !ok {
                violation(
                    out,
                    "intent_before_entry",
                    format!("no intent from {who} delivered before conflict entry at {deadline:.2} s ({}/{})", c.a, c.b),
                );
            }
        }
    }
}

fn check_decision(trace: &[TraceEntry], s: &CdaSession, out: &mut Vec<Violation>) {
    // Cycles are judged on everything proposed; loss cannot hide a
    // disagreement.
    let proposed: Vec<DecisionProposal> = trace
        .iter()
        .filter_map(|t| match &t.envelope.payload {
            Payload::DecisionProposal(p) if in_session(&t.envelope.payload, s) => Some(p.clone()),
            _ => None,
        })
        .collect();
    if let Consensus::Conflict(set) = consensus_check(&proposed) {
        let ids: Vec<&str> = set.iter().map(String::as_str).collect();
        violation(out, "priority_cycle", format!("contradictory precedence among {{{}}}", ids.join(", ")));
    }
    for who in &s.participants {
        let agreed = trace.iter().any(|t| {
            t.delivered && matches!(&t.envelope.payload, Payload::DecisionProposal(p) if p.proposer == *who && p.session == s.id)
        });
        if !agreed {
            violation(out, "decision_missing", format!("no delivered proposal from {who}"));
        }
    }
}

fn check_control(trace: &[TraceEntry], s: &CdaSession, out: &mut Vec<Violation>) {
    for t in trace {
        let Payload::ControlCommand(cmd) = &t.envelope.payload else { continue };
        if cmd.session != s.id {
            continue;
        }
        let cmd_arrival = t.delivered.then_some(t.envelope.deliver_ts);
        let acked = cmd_arrival.is_some_and(|arrival| {
            trace.iter().any(|a| {
                a.delivered
                    && a.envelope.sent_at >= arrival - GAP_EPS
                    && a.envelope.deliver_ts <= cmd.valid_until + GAP_EPS
                    && matches!(&a.envelope.payload, Payload::ControlAck(k)
                        if k.cmd_id == cmd.cmd_id && k.vehicle == cmd.target && k.session == s.id)
            })
        });
        if !acked {
            violation(
                out,
                "control_ack",
                format!(
                    "command {} to {} not acknowledged within [{:.2}, {:.2}] s",
                    cmd.cmd_id, cmd.target, cmd.valid_from, cmd.valid_until
                ),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(order: &[&str]) -> DecisionProposal {
        DecisionProposal {
            session: "s".into(),
            proposer: order[0].into(),
            order: order.iter().map(|s| s.to_string()).collect(),
            action: String::new(),
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(
            consensus_check(&[prop(&["A", "B"]), prop(&["A", "B"])]),
            Consensus::Order(vec!["A".into(), "B".into()])
        );
        assert_eq!(
            consensus_check(&[prop(&["A", "B"]), prop(&["B", "C"])]),
            Consensus::Order(vec!["A".into(), "B".into(), "C".into()])
        );
        assert_eq!(
            consensus_check(&[prop(&["A", "B"]), prop(&["B", "A"])]),
            Consensus::Conflict(set(&["A", "B"]))
        );
    }

    #[test]
    fn conflict_is_a_shortest_cycle() {
        let c = consensus_check(&[
            prop(&["A", "B", "C", "D"]),
            prop(&["D", "A"]),
            prop(&["C", "B"]),
            prop(&["E", "F"]),
        ]);
        assert_eq!(c, Consensus::Conflict(set(&["B", "C"])));
    }

    #[test]
    fn level_tag_must_match_body() {
        let m = CdaMessage {
            level: CdaLevel::IntentSharing,
            body: Payload::DecisionProposal(prop(&["A", "B"])),
        };
        assert!(!m.is_consistent());
    }
}
