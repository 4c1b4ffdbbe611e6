//! Wire protocol and adapters for algorithms under test.
//!
//! Every record is a frame: a big-endian `u32` payload length, a big-endian
//! `u32` CRC-32 of the payload, then the payload as UTF-8 JSON with a
//! `"type"` tag. The platform connects, sends `hello` with the protocol
//! version and the vehicle it controls, and expects `hello_ack`. Each tick
//! it sends one `observation` and waits up to the deadline for the matching
//! `control`. `goodbye` ends the session from either side.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{MessageEnvelope, Payload};
use crate::cooperation::cda::StateShare;
use crate::traffic::{idm_accel, IdmParams, Perception};
use crate::world::{EntityState, LaneIntent};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 1 << 20;
pub const BUILTIN_POLICIES: &[&str] = &["idm", "coop_idm", "zero_accel", "full_throttle", "stall", "cruise"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutError {
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt frame: {0}")]
    Corrupt(String),
    #[error("incomplete frame")]
    Incomplete,
    #[error("protocol version {got} not supported (expected {expected})")]
    Version { expected: u32, got: u32 },
    #[error("handshake rejected: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("deadline exceeded")]
    Timeout,
    #[error("connection closed")]
    Closed,
    /// An error recorded in a log, reproduced during replay.
    #[error("{0}")]
    Replayed(String),
}

impl From<std::io::Error> for AutError {
    fn from(e: std::io::Error) -> Self {
        AutError::Io(e.to_string())
    }
}

/// A message the algorithm asks the platform to publish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub channel: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutReply {
    pub tick: u64,
    pub accel: f64,
    #[serde(default)]
    pub intent: LaneIntent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lateral: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emit: Vec<Emission>,
}

impl AutReply {
    pub fn accel(tick: u64, accel: f64) -> Self {
        Self {
            tick,
            accel,
            intent: LaneIntent::Keep,
            lateral: None,
            emit: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tick: u64,
    pub time: f64,
    pub ego: EntityState,
    /// Entities within sensing range, by id.
    pub neighbors: Vec<EntityState>,
    pub perception: Perception,
    /// Messages delivered to the vehicle this tick.
    #[serde(default)]
    pub messages: Vec<MessageEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AutMessage {
    Hello {
        version: u32,
        vehicle: String,
    },
    HelloAck {
        version: u32,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        algorithm: Option<String>,
    },
    Observation(Observation),
    Control(AutReply),
    Goodbye {
        #[serde(default)]
        reason: String,
    },
}

pub fn encode_frame(msg: &AutMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("protocol messages serialize");
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decode the frame at the start of `buf`; returns the message and the
/// number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(AutMessage, usize), AutError> {
    if buf.len() < 8 {
        return Err(AutError::Incomplete);
    }
    let len = u32::from_be_bytes(buf[0..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(AutError::Corrupt(format!("length {len} exceeds limit")));
    }
    if buf.len() < 8 + len {
        return Err(AutError::Incomplete);
    }
    let crc = u32::from_be_bytes(buf[4..8].try_into().unwrap());
    let body = &buf[8..8 + len];
    if crc32fast::hash(body) != crc {
        return Err(AutError::Corrupt("checksum mismatch".into()));
    }
    let msg = serde_json::from_slice(body).map_err(|e| AutError::Corrupt(e.to_string()))?;
    Ok((msg, 8 + len))
}

/// Decode a buffer that must hold exactly one frame.
pub fn decode_exact(buf: &[u8]) -> Result<AutMessage, AutError> {
    let (msg, used) = decode_frame(buf)?;
    if used != buf.len() {
        return Err(AutError::Corrupt(format!("{} trailing bytes", buf.len() - used)));
    }
    Ok(msg)
}

/// Frame reader over a byte stream that survives read timeouts mid-frame.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, buf: Vec::new() }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut R {
        &mut self.inner
    }

    /// Next frame; read timeouts surface as [`AutError::Timeout`] with any
    /// partial frame kept for the next call.
    pub fn read(&mut self) -> Result<AutMessage, AutError> {
        loop {
            match decode_frame(&self.buf) {
                Ok((msg, used)) => {
                    self.buf.drain(..used);
                    return Ok(msg);
                }
                Err(AutError::Incomplete) => {}
                Err(e) => return Err(e),
            }
            let mut chunk = [0u8; 8192];
            match self.inner.read(&mut chunk) {
                Ok(0) => return Err(AutError::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(AutError::Timeout);
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn write_frame(w: &mut impl Write, msg: &AutMessage) -> Result<(), AutError> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

pub trait AutAdapter: Send {
    fn handshake(&mut self, vehicle: &str) -> Result<(), AutError>;
    fn step(&mut self, obs: &Observation) -> Result<AutReply, AutError>;
    fn close(&mut self) {}
    /// Name and version reported by the algorithm.
    fn algorithm(&self) -> String;
}

/// Built-in reference policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// IDM on the platform's perception digest.
    Idm,
    /// IDM that also shares its state on the `v2x` channel.
    CoopIdm,
    ZeroAccel,
    FullThrottle,
    /// Brakes to a standstill and stays there.
    Stall,
    /// Tracks the desired speed, blind to other traffic.
    Cruise,
}

impl Policy {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "idm" => Policy::Idm,
            "coop_idm" => Policy::CoopIdm,
            "zero_accel" => Policy::ZeroAccel,
            "full_throttle" => Policy::FullThrottle,
            "stall" => Policy::Stall,
            "cruise" => Policy::Cruise,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Idm => "idm",
            Policy::CoopIdm => "coop_idm",
            Policy::ZeroAccel => "zero_accel",
            Policy::FullThrottle => "full_throttle",
            Policy::Stall => "stall",
            Policy::Cruise => "cruise",
        }
    }

    pub fn decide(self, obs: &Observation, p: &IdmParams) -> AutReply {
        let v = obs.ego.speed;
        let v0 = p.v0.min(obs.perception.speed_limit);
        let accel = match self {
            Policy::Idm | Policy::CoopIdm => {
                let params = IdmParams { v0, ..*p };
                let per = &obs.perception;
                let mut a = match per.leader {
                    Some((gap, vl)) => idm_accel(gap, v, vl, &params),
                    None => idm_accel(f64::INFINITY, v, v, &params),
                }
                .unwrap_or(-p.b_hard);
                let stops = per.stop_gap.map(|g| (g, 0.0)).into_iter();
                for (gap, vl) in stops.chain(per.yield_to.iter().copied()) {
                    a = a.min(idm_accel(gap, v, vl, &params).unwrap_or(-p.b_hard));
                }
                a
            }
            Policy::ZeroAccel => 0.0,
            Policy::FullThrottle => p.a_max.max(3.0),
            Policy::Stall => {
                if v > 0.0 {
                    -p.b_comf
                } else {
                    0.0
                }
            }
            Policy::Cruise => (0.5 * (v0 - v)).clamp(-p.b_comf, p.a_max),
        };
        let mut reply = AutReply::accel(obs.tick, accel);
        if self == Policy::CoopIdm {
            let e = &obs.ego;
            reply.emit.push(Emission {
                channel: "v2x".into(),
                payload: Payload::StateShare(StateShare {
                    id: e.id.clone(),
                    x: e.pose.x,
                    y: e.pose.y,
                    heading: e.pose.heading,
                    speed: e.speed,
                    accel: e.accel,
                    lane: e.lane.clone(),
                    session: None,
                }),
            });
        }
        reply
    }
}

/// In-process adapter around a [`Policy`].
pub struct BuiltinAut {
    pub policy: Policy,
    pub params: IdmParams,
}

impl AutAdapter for BuiltinAut {
    fn handshake(&mut self, _vehicle: &str) -> Result<(), AutError> {
        Ok(())
    }

    fn step(&mut self, obs: &Observation) -> Result<AutReply, AutError> {
        Ok(self.policy.decide(obs, &self.params))
    }

    fn algorithm(&self) -> String {
        format!("builtin-{}", self.policy.name())
    }
}

/// Adapter speaking the framed protocol over TCP.
pub struct TcpAut {
    reader: FrameReader<TcpStream>,
    deadline: Duration,
    algorithm: String,
}

impl TcpAut {
    pub fn connect(address: &str, deadline: Duration) -> Result<Self, AutError> {
        let stream = TcpStream::connect(address)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: FrameReader::new(stream),
            deadline,
            algorithm: String::new(),
        })
    }

    fn send(&mut self, msg: &AutMessage) -> Result<(), AutError> {
        write_frame(self.reader.get_mut(), msg)
    }

    fn recv_until(&mut self, until: Instant) -> Result<AutMessage, AutError> {
        let now = Instant::now();
        if now >= until {
            return Err(AutError::Timeout);
        }
        self.reader.get_ref().set_read_timeout(Some(until - now))?;
        self.reader.read()
    }
}

impl AutAdapter for TcpAut {
    fn handshake(&mut self, vehicle: &str) -> Result<(), AutError> {
        self.send(&AutMessage::Hello {
            version: PROTOCOL_VERSION,
            vehicle: vehicle.to_string(),
        })?;
        // Handshakes get a generous fixed allowance.
        match self.recv_until(Instant::now() + Duration::from_secs(5))? {
            AutMessage::HelloAck {
                version,
                accepted: true,
                algorithm,
                ..
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(AutError::Version {
                        expected: PROTOCOL_VERSION,
                        got: version,
                    });
                }
                self.algorithm = algorithm.unwrap_or_else(|| "external".into());
                Ok(())
            }
            AutMessage::HelloAck { reason, .. } => Err(AutError::Rejected(reason.unwrap_or_default())),
            other => Err(AutError::Protocol(format!("expected hello_ack, got {other:?}"))),
        }
    }

    fn step(&mut self, obs: &Observation) -> Result<AutReply, AutError> {
        let until = Instant::now() + self.deadline;
        self.send(&AutMessage::Observation(obs.clone()))?;
        loop {
            match self.recv_until(until)? {
                // Late reply to an earlier tick.
                AutMessage::Control(r) if r.tick < obs.tick => continue,
                AutMessage::Control(r) if r.tick == obs.tick => {
                    if !r.accel.is_finite() || r.lateral.is_some_and(|l| !l.is_finite()) {
                        return Err(AutError::Protocol("non-finite control".into()));
                    }
                    return Ok(r);
                }
                AutMessage::Goodbye { .. } => return Err(AutError::Closed),
                other => return Err(AutError::Protocol(format!("unexpected {other:?}"))),
            }
        }
    }

    fn close(&mut self) {
        let _ = self.send(&AutMessage::Goodbye {
            reason: "run finished".into(),
        });
    }

    fn algorithm(&self) -> String {
        self.algorithm.clone()
    }
}

/// Serve one platform connection from the algorithm side, answering each
/// observation with `decide`. Rejects other protocol versions.
pub fn serve_aut(
    stream: TcpStream,
    algorithm: &str,
    mut decide: impl FnMut(&Observation) -> Option<AutReply>,
) -> Result<(), AutError> {
    let mut writer = stream.try_clone()?;
    let mut reader = FrameReader::new(stream);
    match reader.read()? {
        AutMessage::Hello { version, .. } if version == PROTOCOL_VERSION => write_frame(
            &mut writer,
            &AutMessage::HelloAck {
                version: PROTOCOL_VERSION,
                accepted: true,
                reason: None,
                algorithm: Some(algorithm.to_string()),
            },
        )?,
        AutMessage::Hello { version, .. } => {
            write_frame(
                &mut writer,
                &AutMessage::HelloAck {
                    version: PROTOCOL_VERSION,
                    accepted: false,
                    reason: Some(format!("version {version} not supported")),
                    algorithm: None,
                },
            )?;
            return Err(AutError::Version {
                expected: PROTOCOL_VERSION,
                got: version,
            });
        }
        other => return Err(AutError::Protocol(format!("expected hello, got {other:?}"))),
    }
    loop {
        match reader.read() {
            Ok(AutMessage::Observation(obs)) => {
                if let Some(reply) = decide(&obs) {
                    write_frame(&mut writer, &AutMessage::Control(reply))?;
                }
            }
            Ok(AutMessage::Goodbye { .. }) | Err(AutError::Closed) => return Ok(()),
            Ok(other) => return Err(AutError::Protocol(format!("unexpected {other:?}"))),
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{EntityKind, Pose};
    use proptest::prelude::*;
    use std::net::TcpListener;

    fn obs(tick: u64) -> Observation {
        Observation {
            tick,
            time: tick as f64 * 0.1,
            ego: EntityState::free("v", EntityKind::VirtualCav, Pose::new(1.0, 2.0, 0.0), 10.0),
            neighbors: vec![],
            perception: Perception {
                speed_limit: 15.0,
                ..Perception::default()
            },
            messages: vec![],
        }
    }

    #[test]
    fn frame_round_trip() {
        let m = AutMessage::Observation(obs(3));
        let f = encode_frame(&m);
        assert_eq!(decode_exact(&f).unwrap(), m);
        assert_eq!(decode_frame(&f[..5]), Err(AutError::Incomplete));
    }

    proptest! {
        #[test]
        fn any_corruption_is_detected(pos in 0usize..4096, flip in 1u8..=255) {
            let m = AutMessage::Control(AutReply::accel(7, 1.25));
            let mut f = encode_frame(&m);
            let pos = pos % f.len();
            f[pos] ^= flip;
            prop_assert!(decode_exact(&f).is_err());
        }
    }

    fn spawn_server(algorithm: &'static str, decide: impl FnMut(&Observation) -> Option<AutReply> + Send + 'static) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let _ = serve_aut(s, algorithm, decide);
        });
        addr
    }

    #[test]
    fn tcp_handshake_and_step() {
        let addr = spawn_server("stub/1.0", |o| Some(AutReply::accel(o.tick, 1.0)));
        let mut a = TcpAut::connect(&addr, Duration::from_millis(500)).unwrap();
        a.handshake("v").unwrap();
        assert_eq!(a.algorithm(), "stub/1.0");
        assert_eq!(a.step(&obs(0)).unwrap().accel, 1.0);
        assert_eq!(a.step(&obs(1)).unwrap().tick, 1);
        a.close();
    }

    #[test]
    fn wrong_version_is_rejected() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            serve_aut(s, "x", |_| None)
        });
        let mut s = TcpStream::connect(addr).unwrap();
        write_frame(&mut s, &AutMessage::Hello { version: 99, vehicle: "v".into() }).unwrap();
        let mut r = FrameReader::new(s);
        match r.read().unwrap() {
            AutMessage::HelloAck { accepted, reason, .. } => {
                assert!(!accepted);
                assert!(reason.unwrap().contains("99"));
            }
            m => panic!("{m:?}"),
        }
        assert_eq!(server.join().unwrap(), Err(AutError::Version { expected: 1, got: 99 }));
    }

    #[test]
    fn silent_aut_times_out_then_recovers() {
        let addr = spawn_server("slow", |o| {
            if o.tick == 0 {
                std::thread::sleep(Duration::from_millis(120));
            }
            Some(AutReply::accel(o.tick, o.tick as f64))
        });
        let mut a = TcpAut::connect(&addr, Duration::from_millis(50)).unwrap();
        a.handshake("v").unwrap();
        assert_eq!(a.step(&obs(0)), Err(AutError::Timeout));
        std::thread::sleep(Duration::from_millis(150));
        // The stale tick-0 reply is skipped.
        assert_eq!(a.step(&obs(1)).unwrap().accel, 1.0);
    }

    #[test]
    fn policies() {
        let p = IdmParams::default();
        let o = obs(0);
        assert_eq!(Policy::ZeroAccel.decide(&o, &p).accel, 0.0);
        assert!(Policy::Stall.decide(&o, &p).accel < 0.0);
        assert!(Policy::FullThrottle.decide(&o, &p).accel > 0.0);
        assert_eq!(Policy::CoopIdm.decide(&o, &p).emit.len(), 1);
        for name in BUILTIN_POLICIES {
            assert_eq!(Policy::from_name(name).unwrap().name(), *name);
        }
    }
}
