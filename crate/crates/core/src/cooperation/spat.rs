//! Fixed-cycle signal plans, SPAT state and green-light speed advice.
//!
//! Time inside a cycle is kept in integer milliseconds so that the state at
//! `t` and `t + cycle` is identical regardless of float accumulation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub duration: f64,
    /// Phase shown to each approach during this stage.
    pub phases: BTreeMap<String, Phase>,
}

/// Where a signal head sits: a stop line on a lane, governed by an approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalHead {
    pub lane: String,
    pub station: f64,
    pub approach: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub id: String,
    #[serde(default)]
    pub offset: f64,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub heads: Vec<SignalHead>,
}

impl SignalPlan {
    pub fn validate(&self) -> Result<(), String> {
        let Some(first) = self.stages.first() else {
            return Err("signal plan has no stages".into());
        };
        let approaches: BTreeSet<&String> = first.phases.keys().collect();
        if approaches.is_empty() {
            return Err("stage declares no approaches".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if !(st.duration > 0.0) || to_ms(st.duration) == 0 {
                return Err(format!("stage {i}: duration must be positive"));
            }
            if st.phases.keys().collect::<BTreeSet<_>>() != approaches {
                return Err(format!("stage {i}: phases must cover the same approaches"));
            }
        }
        for head in &self.heads {
            if !approaches.contains(&head.approach) {
                return Err(format!("head on {} names unknown approach {}", head.lane, head.approach));
            }
        }
        if !self.offset.is_finite() {
            return Err("offset must be finite".into());
        }
        Ok(())
    }

    pub fn cycle_length(&self) -> f64 {
        cycle_ms(&self.stages) as f64 / 1000.0
    }

    /// SPAT state at absolute time `now`.
    pub fn spat_at(&self, now: f64) -> Spat {
        Spat::from_cycle(&self.id, &self.stages, self.offset, now)
    }
}

/// Signal phase and timing as broadcast by a signal controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spat {
    pub signal_id: String,
    pub stage: usize,
    pub phases: BTreeMap<String, Phase>,
    pub time_to_change: f64,
    pub cycle: Vec<Stage>,
    pub offset: f64,
}

fn to_ms(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

fn cycle_ms(stages: &[Stage]) -> i64 {
    stages.iter().map(|s| to_ms(s.duration)).sum()
}

/// Position inside the cycle: (stage index, ms elapsed into the cycle).
fn locate(stages: &[Stage], offset: f64, now: f64) -> (usize, i64, i64) {
    let total = cycle_ms(stages);
    let pos = (to_ms(now) - to_ms(offset)).rem_euclid(total);
    let mut start = 0;
    for (i, st) in stages.iter().enumerate() {
        let end = start + to_ms(st.duration);
        if pos < end {
            return (i, pos, end);
        }
        start = end;
    }
    unreachable!("position {pos} outside cycle of {total} ms")
}

impl Spat {
    fn from_cycle(id: &str, stages: &[Stage], offset: f64, now: f64) -> Self {
        let (stage, pos, end) = locate(stages, offset, now);
        Spat {
            signal_id: id.to_string(),
            stage,
            phases: stages[stage].phases.clone(),
            time_to_change: (end - pos) as f64 / 1000.0,
            cycle: stages.to_vec(),
            offset,
        }
    }

    pub fn phase(&self, approach: &str) -> Option<Phase> {
        self.phases.get(approach).copied()
    }

    /// Green intervals for `approach`, relative to `now`, covering at least
    /// `horizon` seconds. Adjacent green stages are merged; an interval that
    /// is already open starts at 0.
    pub fn green_windows(&self, approach: &str, now: f64, horizon: f64) -> Vec<(f64, f64)> {
        let (mut stage, pos, end) = locate(&self.cycle, self.offset, now);
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut t0 = 0i64;
        let mut t1 = end - pos;
        loop {
            if self.cycle[stage].phases.get(approach) == Some(&Phase::Green) {
                let (a, b) = (t0 as f64 / 1000.0, t1 as f64 / 1000.0);
                match out.last_mut() {
                    Some(last) if last.1 == a => last.1 = b,
                    _ => out.push((a, b)),
                }
            }
            if t0 as f64 / 1000.0 > horizon {
                break;
            }
            stage = (stage + 1) % self.cycle.len();
            t0 = t1;
            t1 += to_ms(self.cycle[stage].duration);
        }
        out
    }
}

/// Advance a SPAT record to time `now`; the cycle wraps.
pub fn spat_next(s: &Spat, now: f64) -> Spat {
    Spat::from_cycle(&s.signal_id, &s.cycle, s.offset, now)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "advice", content = "speed")]
pub enum Advice {
    Speed(f64),
    Stop,
}

/// How many cycles ahead GLOSA looks for a reachable green.
const GLOSA_CYCLES: f64 = 3.0;

/// Green-light optimal speed advice for a vehicle `dist` metres from the stop
/// line of `approach`.
///
/// Each green window `[ts, te]` is shrunk by a margin `min(0.5, (te-ts)/4)`
/// on both sides so that the advised arrival falls strictly inside it. The
/// first window whose speed band intersects `[v_min, v_max]` wins, and the
/// highest speed of that band is advised.
pub fn glosa_advice(dist: f64, spat: &Spat, approach: &str, now: f64, v_min: f64, v_max: f64) -> Advice {
    if !(dist > 0.0) || v_max <= 0.0 || v_min > v_max {
        return Advice::Stop;
    }
    let horizon = GLOSA_CYCLES * cycle_ms(&spat.cycle) as f64 / 1000.0;
    for (ts, te) in spat.green_windows(approach, now, horizon) {
        let margin = (0.25 * (te - ts)).min(0.5);
        let (lo_t, hi_t) = (ts + margin, te - margin);
        if hi_t <= lo_t {
            continue;
        }
        let lo_v = dist / hi_t;
        let hi_v = if lo_t > 0.0 { dist / lo_t } else { f64::INFINITY };
        let v = hi_v.min(v_max);
        if v >= lo_v.max(v_min) && v > 0.0 {
            return Advice::Speed(v);
        }
    }
    Advice::Stop
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(green: f64, yellow: f64, red: f64) -> SignalPlan {
        let st = |d, p| Stage {
            duration: d,
            phases: BTreeMap::from([("main".to_string(), p)]),
        };
        SignalPlan {
            id: "s1".into(),
            offset: 0.0,
            stages: vec![st(green, Phase::Green), st(yellow, Phase::Yellow), st(red, Phase::Red)],
            heads: vec![],
        }
    }

    #[test]
    fn yellow_starts_at_green_end() {
        let p = plan(20.0, 3.0, 37.0);
        let s = p.spat_at(19.9);
        assert_eq!(s.phase("main"), Some(Phase::Green));
        assert!((s.time_to_change - 0.1).abs() < 1e-12);
        let next = spat_next(&s, 20.0);
        assert_eq!(next.phase("main"), Some(Phase::Yellow));
        assert!((next.time_to_change - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_is_periodic() {
        let p = plan(20.0, 3.0, 37.0);
        for k in 0..600 {
            let t = k as f64 * 0.1;
            assert_eq!(p.spat_at(t), p.spat_at(t + 60.0));
        }
    }

    #[test]
    fn mid_phase_only_countdown_moves() {
        let p = plan(20.0, 3.0, 37.0);
        let a = p.spat_at(5.0);
        let b = spat_next(&a, 5.1);
        assert_eq!(a.stage, b.stage);
        assert_eq!(a.phases, b.phases);
        assert!((a.time_to_change - b.time_to_change - 0.1).abs() < 1e-12);
    }

    #[test]
    fn green_windows_merge_and_wrap() {
        let p = plan(20.0, 3.0, 37.0);
        let w = p.spat_at(10.0).green_windows("main", 10.0, 100.0);
        assert_eq!(w[0], (0.0, 10.0));
        assert_eq!(w[1], (50.0, 70.0));
    }

    #[test]
    fn glosa_examples() {
        // Red for 10 s, then green until 30 s.
        let mut p = plan(20.0, 3.0, 37.0);
        p.offset = 10.0;
        let s = p.spat_at(47.0);
        assert_eq!(s.green_windows("main", 47.0, 30.0)[0], (23.0, 43.0));
        let s = p.spat_at(0.0);
        assert_eq!(s.green_windows("main", 0.0, 30.0)[0], (10.0, 30.0));
        assert_eq!(glosa_advice(200.0, &s, "main", 0.0, 0.0, 15.0), Advice::Speed(15.0));

        // Green only in [5, 10] s of this cycle: 200 m needs 20 m/s, so the
        // advice targets the next cycle.
        let mut q = plan(5.0, 3.0, 52.0);
        q.offset = 5.0;
        let s = q.spat_at(0.0);
        match glosa_advice(200.0, &s, "main", 0.0, 0.0, 15.0) {
            Advice::Speed(v) => {
                let arrival = 200.0 / v;
                assert!(arrival > 65.0 && arrival < 70.0, "arrival {arrival}");
            }
            Advice::Stop => panic!("expected next-cycle advice"),
        }

        // Currently green with plenty of time left.
        let s = plan(20.0, 3.0, 37.0).spat_at(0.0);
        assert_eq!(glosa_advice(100.0, &s, "main", 0.0, 0.0, 15.0), Advice::Speed(15.0));
    }

    #[test]
    fn validation_catches_bad_plans() {
        let mut p = plan(20.0, 3.0, 37.0);
        assert!(p.validate().is_ok());
        p.stages[1].duration = 0.0;
        assert!(p.validate().is_err());
        let mut p = plan(20.0, 3.0, 37.0);
        p.stages[2].phases.insert("side".into(), Phase::Green);
        assert!(p.validate().is_err());
    }
}
