//! Latency-modelled message bus.
//!
//! Two transport classes exist: `platform` (the central data service every
//! node talks to) and `broadcast` (V2X radio with a coverage radius). Each
//! publish draws a delivery time `now + base + U(0, jitter)` and may be
//! dropped. Delivery is FIFO per (sender, channel): a message is held back
//! until every earlier message from the same sender on the same channel has
//! been delivered.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cooperation::cda::{CdaLevel, ControlAck, ControlCommand, DecisionProposal, IntentShare, StateShare};
use crate::cooperation::spat::Spat;
use crate::cooperation::warnings::Warning;
use crate::deduction::TakeoverEvent;
use crate::rng::SimRng;
use crate::world::Pose;

/// Messages due within this tolerance of `now` are delivered.
const DUE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BusError {
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("channel {0}: {1}")]
    InvalidConfig(String, String),
    #[error("no delivered messages")]
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelClass {
    Platform,
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub name: String,
    pub class: ChannelClass,
    pub base_latency: f64,
    pub jitter: f64,
    #[serde(default)]
    pub drop_prob: f64,
    /// Coverage radius in metres; `None` means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
}

impl ChannelConfig {
    /// Platform defaults: 20 ms base, 10 ms jitter, lossless.
    pub fn platform(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            class: ChannelClass::Platform,
            base_latency: 0.02,
            jitter: 0.01,
            drop_prob: 0.0,
            range: None,
        }
    }

    /// Roadside broadcast defaults: 50 ms base, up to 100 ms jitter, 1 km range.
    pub fn broadcast(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            class: ChannelClass::Broadcast,
            base_latency: 0.05,
            jitter: 0.1,
            drop_prob: 0.0,
            range: Some(1000.0),
        }
    }

    pub fn validate(&self) -> Result<(), BusError> {
        let bad = |m: &str| Err(BusError::InvalidConfig(self.name.clone(), m.to_string()));
        if !(self.base_latency >= 0.0) || !self.base_latency.is_finite() {
            return bad("base_latency must be >= 0");
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return bad("jitter must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad("drop_prob must be in [0, 1]");
        }
        if let Some(r) = self.range {
            if !(r > 0.0) {
                return bad("range must be > 0");
            }
            if self.class == ChannelClass::Platform {
                return bad("range applies to broadcast channels only");
            }
        }
        Ok(())
    }

    /// Worst-case modelled latency.
    pub fn max_latency(&self) -> f64 {
        self.base_latency + self.jitter
    }
}

/// Operator/test control messages carried on the platform channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskControl {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Payload {
    StateShare(StateShare),
    IntentShare(IntentShare),
    DecisionProposal(DecisionProposal),
    ControlCommand(ControlCommand),
    ControlAck(ControlAck),
    Spat(Spat),
    Warning(Warning),
    TakeoverEvent(TakeoverEvent),
    TaskControl(TaskControl),
}

impl Payload {
    /// Cooperation session the payload belongs to, if any.
    pub fn session(&self) -> Option<&str> {
        match self {
            Payload::StateShare(m) => m.session.as_deref(),
            Payload::IntentShare(m) => Some(&m.session),
            Payload::DecisionProposal(m) => Some(&m.session),
            Payload::ControlCommand(m) => Some(&m.session),
            Payload::ControlAck(m) => Some(&m.session),
            _ => None,
        }
    }

    pub fn cda_level(&self) -> Option<CdaLevel> {
        match self {
            Payload::StateShare(_) => Some(CdaLevel::StateSharing),
            Payload::IntentShare(_) => Some(CdaLevel::IntentSharing),
            Payload::DecisionProposal(_) => Some(CdaLevel::CoopDecision),
            Payload::ControlCommand(_) | Payload::ControlAck(_) => Some(CdaLevel::CoopControl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub channel: String,
    pub sender: String,
    pub seq: u64,
    /// Send time on the sender's own clock.
    pub send_ts: f64,
    /// Send time on the simulator clock.
    pub sent_at: f64,
    pub deliver_ts: f64,
    /// Sender position at send time (broadcast reachability is measured
    /// from here).
    pub origin: [f64; 2],
    pub payload: Payload,
}

impl MessageEnvelope {
    pub fn latency(&self) -> f64 {
        self.deliver_ts - self.sent_at
    }

    fn order_key(&self) -> (f64, &str, u64, &str) {
        (self.deliver_ts, &self.sender, self.seq, &self.channel)
    }
}

fn key_cmp(a: &MessageEnvelope, b: &MessageEnvelope) -> std::cmp::Ordering {
    let (ta, sa, qa, ca) = a.order_key();
    let (tb, sb, qb, cb) = b.order_key();
    ta.total_cmp(&tb)
        .then_with(|| sa.cmp(sb))
        .then_with(|| qa.cmp(&qb))
        .then_with(|| ca.cmp(cb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "envelope", rename_all = "snake_case")]
pub enum PublishOutcome {
    Queued(MessageEnvelope),
    Dropped(MessageEnvelope),
}

impl PublishOutcome {
    pub fn envelope(&self) -> &MessageEnvelope {
        match self {
            PublishOutcome::Queued(e) | PublishOutcome::Dropped(e) => e,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct LinkState {
    next_seq: u64,
    last_deliver: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageBus {
    channels: BTreeMap<String, ChannelConfig>,
    /// Pending envelopes sorted by delivery order.
    queue: Vec<MessageEnvelope>,
    links: BTreeMap<String, BTreeMap<String, LinkState>>,
}

impl MessageBus {
    pub fn new(channels: impl IntoIterator<Item = ChannelConfig>) -> Result<Self, BusError> {
        let mut map = BTreeMap::new();
        for c in channels {
            c.validate()?;
            map.insert(c.name.clone(), c);
        }
        Ok(Self {
            channels: map,
            queue: Vec::new(),
            links: BTreeMap::new(),
        })
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelConfig> {
        self.channels.get(name)
    }

    pub fn channels(&self) -> impl Iterator<Item = &ChannelConfig> {
        self.channels.values()
    }

    pub fn pending(&self) -> &[MessageEnvelope] {
        &self.queue
    }

    /// Queue a message, or drop it with the channel's loss probability.
    #[allow(clippy::too_many_arguments)]
    pub fn publish(
        &mut self,
        channel: &str,
        sender: &str,
        payload: Payload,
        now: f64,
        sender_pose: &Pose,
        node_offset: f64,
        rng: &mut SimRng,
    ) -> Result<PublishOutcome, BusError> {
        let cfg = self
            .channels
            .get(channel)
            .ok_or_else(|| BusError::UnknownChannel(channel.to_string()))?;
        let jitter = if cfg.jitter > 0.0 { rng.range(0.0, cfg.jitter) } else { 0.0 };
        let dropped = cfg.drop_prob > 0.0 && rng.bernoulli(cfg.drop_prob);
        let link = self
            .links
            .entry(sender.to_string())
            .or_default()
            .entry(channel.to_string())
            .or_default();
        let seq = link.next_seq;
        link.next_seq += 1;
        let mut env = MessageEnvelope {
            channel: channel.to_string(),
            sender: sender.to_string(),
            seq,
            send_ts: now + node_offset,
            sent_at: now,
            deliver_ts: now + cfg.base_latency + jitter,
            origin: [sender_pose.x, sender_pose.y],
            payload,
        };
        if dropped {
            return Ok(PublishOutcome::Dropped(env));
        }
        // Hold back behind the previous message of this link.
        env.deliver_ts = env.deliver_ts.max(link.last_deliver);
        link.last_deliver = env.deliver_ts;
        let at = self.queue.partition_point(|q| key_cmp(q, &env).is_lt());
        self.queue.insert(at, env.clone());
        Ok(PublishOutcome::Queued(env))
    }

    /// Remove and return everything due by `now`, in delivery order.
    pub fn deliver_due(&mut self, now: f64) -> Vec<MessageEnvelope> {
        let n = self.queue.partition_point(|q| q.deliver_ts <= now + DUE_EPS);
        self.queue.drain(..n).collect()
    }

    /// Entities that receive `env`, given candidate positions. Platform
    /// messages reach everyone; broadcasts only reach receivers within range
    /// of the sender's transmit position. The sender never receives its own
    /// message.
    pub fn recipients<'a>(
        &self,
        env: &MessageEnvelope,
        candidates: impl IntoIterator<Item = (&'a str, &'a Pose)>,
    ) -> Vec<String> {
        let range = self.channels.get(&env.channel).and_then(|c| c.range);
        candidates
            .into_iter()
            .filter(|(id, _)| *id != env.sender)
            .filter(|(_, p)| {
                range.is_none_or(|r| (p.x - env.origin[0]).hypot(p.y - env.origin[1]) <= r)
            })
            .map(|(id, _)| id.to_string())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p99: f64,
    pub max: f64,
}

/// Mean, nearest-rank 99th percentile and maximum of delivery latencies.
pub fn latency_stats(delivered: &[MessageEnvelope]) -> Result<LatencyStats, BusError> {
    if delivered.is_empty() {
        return Err(BusError::NoData);
    }
    let mut lat: Vec<f64> = delivered.iter().map(MessageEnvelope::latency).collect();
    lat.sort_by(f64::total_cmp);
    let n = lat.len();
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    Ok(LatencyStats {
        mean: lat.iter().sum::<f64>() / n as f64,
        p99: lat[rank - 1],
        max: lat[n - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Payload {
        Payload::TaskControl(TaskControl {
            command: "noop".into(),
            value: None,
        })
    }

    fn origin() -> Pose {
        Pose::new(0.0, 0.0, 0.0)
    }

    #[test]
    fn fixed_latency_without_jitter() {
        let mut cfg = ChannelConfig::broadcast("v2x");
        cfg.jitter = 0.0;
        let mut bus = MessageBus::new([cfg]).unwrap();
        let mut rng = SimRng::new(1, 2);
        let out = bus.publish("v2x", "a", task(), 3.0, &origin(), 0.0, &mut rng).unwrap();
        assert_eq!(out.envelope().deliver_ts, 3.05);
    }

    #[test]
    fn drop_prob_one_always_drops() {
        let mut cfg = ChannelConfig::platform("p");
        cfg.drop_prob = 1.0;
        let mut bus = MessageBus::new([cfg]).unwrap();
        let mut rng = SimRng::new(1, 2);
        for _ in 0..1000 {
            let out = bus.publish("p", "a", task(), 0.0, &origin(), 0.0, &mut rng).unwrap();
            assert!(matches!(out, PublishOutcome::Dropped(_)));
        }
        assert!(bus.pending().is_empty());
    }

    #[test]
    fn out_of_range_drop_prob_is_rejected() {
        let mut cfg = ChannelConfig::platform("p");
        cfg.drop_prob = 1.5;
        assert!(MessageBus::new([cfg]).is_err());
    }

    #[test]
    fn unknown_channel_is_an_error() {
        let mut bus = MessageBus::new([ChannelConfig::platform("p")]).unwrap();
        let mut rng = SimRng::new(1, 2);
        assert_eq!(
            bus.publish("nope", "a", task(), 0.0, &origin(), 0.0, &mut rng),
            Err(BusError::UnknownChannel("nope".into()))
        );
    }

    #[test]
    fn range_cut_off() {
        let mut bus = MessageBus::new([ChannelConfig::broadcast("v2x")]).unwrap();
        let mut rng = SimRng::new(1, 2);
        let env = bus
            .publish("v2x", "rsu", task(), 0.0, &origin(), 0.0, &mut rng)
            .unwrap()
            .envelope()
            .clone();
        let near = Pose::new(1000.0, 0.0, 0.0);
        let far = Pose::new(1200.0, 0.0, 0.0);
        let got = bus.recipients(&env, [("near", &near), ("far", &far), ("rsu", &origin())]);
        assert_eq!(got, vec!["near".to_string()]);
    }

    #[test]
    fn equal_delivery_times_follow_seq() {
        let mut cfg = ChannelConfig::platform("p");
        cfg.jitter = 0.0;
        let mut bus = MessageBus::new([cfg]).unwrap();
        let mut rng = SimRng::new(1, 2);
        for _ in 0..5 {
            bus.publish("p", "a", task(), 1.0, &origin(), 0.0, &mut rng).unwrap();
        }
        let got: Vec<u64> = bus.deliver_due(2.0).iter().map(|e| e.seq).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn half_tick_latency_waits_one_tick() {
        let cfg = ChannelConfig {
            name: "p".into(),
            class: ChannelClass::Platform,
            base_latency: 0.05,
            jitter: 0.0,
            drop_prob: 0.0,
            range: None,
        };
        let mut bus = MessageBus::new([cfg]).unwrap();
        let mut rng = SimRng::new(1, 2);
        bus.publish("p", "a", task(), 1.0, &origin(), 0.0, &mut rng).unwrap();
        assert!(bus.deliver_due(1.0).is_empty());
        assert_eq!(bus.deliver_due(1.1).len(), 1);
        assert!(bus.deliver_due(1.2).is_empty());
    }

    #[test]
    fn stats() {
        assert_eq!(latency_stats(&[]), Err(BusError::NoData));
        let mut cfg = ChannelConfig::platform("p");
        cfg.jitter = 0.0;
        cfg.base_latency = 0.123;
        let mut bus = MessageBus::new([cfg]).unwrap();
        let mut rng = SimRng::new(1, 2);
        bus.publish("p", "a", task(), 0.0, &origin(), 0.0, &mut rng).unwrap();
        let d = bus.deliver_due(1.0);
        let s = latency_stats(&d).unwrap();
        assert!((s.mean - 0.123).abs() < 1e-12);
        assert_eq!(s.p99, s.max);
        assert!((s.max - 0.123).abs() < 1e-12);
    }

    #[test]
    fn send_ts_uses_sender_clock() {
        let mut bus = MessageBus::new([ChannelConfig::platform("p")]).unwrap();
        let mut rng = SimRng::new(1, 2);
        let out = bus.publish("p", "a", task(), 2.0, &origin(), 0.004, &mut rng).unwrap();
        let env = out.envelope();
        assert_eq!(env.send_ts, 2.004);
        assert!(env.deliver_ts >= env.sent_at);
    }
}
