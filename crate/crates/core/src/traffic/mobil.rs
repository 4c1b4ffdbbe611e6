//! MOBIL lane-change decision.

use serde::{Deserialize, Serialize};

use super::idm::{idm_accel, IdmParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilParams {
    pub politeness: f64,
    /// Minimum net advantage (m/s²).
    pub threshold: f64,
    /// Deceleration the new follower may be forced into at most (m/s²).
    pub safe_decel: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness: 0.3,
            threshold: 0.2,
            safe_decel: 4.0,
        }
    }
}

/// A vehicle next to the ego, `gap` measured bumper to bumper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub gap: f64,
    pub speed: f64,
}

/// Leader and follower on one lane, relative to the ego position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneGaps {
    pub leader: Option<Neighbor>,
    pub follower: Option<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilInput {
    pub speed: f64,
    pub length: f64,
    pub current: LaneGaps,
    pub left: Option<LaneGaps>,
    pub right: Option<LaneGaps>,
    /// Parameters of the ego vehicle.
    pub ego: IdmParams,
    /// Parameters assumed for the surrounding vehicles.
    pub others: IdmParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneDecision {
    Keep,
    ChangeLeft,
    ChangeRight,
}

fn accel_behind(leader: Option<Neighbor>, v: f64, p: &IdmParams) -> Option<f64> {
    match leader {
        None => idm_accel(f64::INFINITY, v, v, p).ok(),
        Some(l) => idm_accel(l.gap, v, l.speed, p).ok(),
    }
}

/// Incentive of moving into `target`, or `None` when the move is unsafe.
fn incentive(inp: &MobilInput, target: &LaneGaps, mp: &MobilParams) -> Option<f64> {
    let len = inp.length;
    let a_now = accel_behind(inp.current.leader, inp.speed, &inp.ego)?;
    let a_new = accel_behind(target.leader, inp.speed, &inp.ego)?;

    // New follower: behind its leader now, behind the ego afterwards.
    let mut followers_delta = 0.0;
    if let Some(nf) = target.follower {
        let after = idm_accel(nf.gap, nf.speed, inp.speed, &inp.others).ok()?;
        if after < -mp.safe_decel {
            return None;
        }
        let before = accel_behind(
            target.leader.map(|l| Neighbor {
                gap: nf.gap + len + l.gap,
                speed: l.speed,
            }),
            nf.speed,
            &inp.others,
        )?;
        followers_delta += after - before;
    }
    // Old follower: behind the ego now, behind the ego's leader afterwards.
    if let Some(of) = inp.current.follower {
        let before = idm_accel(of.gap, of.speed, inp.speed, &inp.others).unwrap_or(-inp.others.b_hard);
        let after = accel_behind(
            inp.current.leader.map(|l| Neighbor {
                gap: of.gap + len + l.gap,
                speed: l.speed,
            }),
            of.speed,
            &inp.others,
        )?;
        followers_delta += after - before;
    }
    Some(a_new - a_now + mp.politeness * followers_delta)
}

pub fn mobil_decide(inp: &MobilInput, mp: &MobilParams) -> LaneDecision {
    let score = |g: &Option<LaneGaps>| g.as_ref().and_then(|g| incentive(inp, g, mp));
    let left = score(&inp.left).filter(|&d| d > mp.threshold);
    let right = score(&inp.right).filter(|&d| d > mp.threshold);
    match (left, right) {
        (Some(l), Some(r)) if r > l => LaneDecision::ChangeRight,
        (Some(_), _) => LaneDecision::ChangeLeft,
        (None, Some(_)) => LaneDecision::ChangeRight,
        (None, None) => LaneDecision::Keep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(current: LaneGaps, left: Option<LaneGaps>) -> MobilInput {
        MobilInput {
            speed: 10.0,
            length: 4.5,
            current,
            left,
            right: None,
            ego: IdmParams::default(),
            others: IdmParams::default(),
        }
    }

    fn blocked() -> LaneGaps {
        LaneGaps {
            leader: Some(Neighbor { gap: 10.0, speed: 0.0 }),
            follower: None,
        }
    }

    #[test]
    fn no_adjacent_lane_keeps() {
        assert_eq!(mobil_decide(&input(blocked(), None), &MobilParams::default()), LaneDecision::Keep);
    }

    #[test]
    fn empty_target_lane_attracts() {
        let d = mobil_decide(&input(blocked(), Some(LaneGaps::default())), &MobilParams::default());
        assert_eq!(d, LaneDecision::ChangeLeft);
    }

    #[test]
    fn safety_veto_on_close_follower() {
        let target = LaneGaps {
            leader: None,
            follower: Some(Neighbor { gap: 3.0, speed: 15.0 }),
        };
        let d = mobil_decide(&input(blocked(), Some(target)), &MobilParams::default());
        assert_eq!(d, LaneDecision::Keep);
    }

    #[test]
    fn no_gain_no_change() {
        let free = LaneGaps::default();
        let d = mobil_decide(&input(free, Some(free)), &MobilParams::default());
        assert_eq!(d, LaneDecision::Keep);
    }
}
