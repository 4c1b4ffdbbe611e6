//! Intelligent driver model.

use serde::{Deserialize, Serialize};

use super::TrafficError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    #[serde(rename = "T")]
    pub t_headway: f64,
    pub a_max: f64,
    pub b_comf: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub delta: f64,
    /// Physical braking limit the output is clamped to.
    pub b_hard: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 15.0,
            t_headway: 1.5,
            a_max: 2.0,
            b_comf: 3.0,
            s0: 2.0,
            delta: 4.0,
            b_hard: 8.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("v0", self.v0),
            ("T", self.t_headway),
            ("a_max", self.a_max),
            ("b_comf", self.b_comf),
            ("s0", self.s0),
            ("b_hard", self.b_hard),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.delta >= 1.0) {
            return Err("delta must be >= 1".into());
        }
        Ok(())
    }

    /// Equilibrium gap at speed `v` behind a leader at the same speed.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + (v * self.t_headway + v * dv / (2.0 * (self.a_max * self.b_comf).sqrt())).max(0.0)
    }
}

/// IDM acceleration for bumper-to-bumper `gap` (infinite on a free road).
pub fn idm_accel(gap: f64, v: f64, v_lead: f64, p: &IdmParams) -> Result<f64, TrafficError> {
    if !(gap > 0.0) {
        return Err(TrafficError::Overlap(gap));
    }
    let free = (v / p.v0).powf(p.delta);
    let interaction = if gap.is_finite() {
        (p.desired_gap(v, v - v_lead) / gap).powi(2)
    } else {
        0.0
    };
    Ok((p.a_max * (1.0 - free - interaction)).clamp(-p.b_hard, p.a_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn free_road_from_rest() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(f64::INFINITY, 0.0, 0.0, &p).unwrap(), 2.0);
    }

    #[test]
    fn equilibrium_on_free_road() {
        let p = IdmParams::default();
        assert!(idm_accel(f64::INFINITY, p.v0, 0.0, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn equilibrium_gap_hand_evaluated() {
        let p = IdmParams::default();
        let gap = 2.0 + 10.0 * 1.5;
        // s* equals the gap, so a = a_max (1 - (10/15)^4 - 1).
        let expected = 2.0 * (1.0 - (10.0f64 / 15.0).powi(4) - 1.0);
        let a = idm_accel(gap, 10.0, 10.0, &p).unwrap();
        assert!((a - expected).abs() < 1e-12);
        assert!((a + 0.395_061_728_395_061_7).abs() < 1e-12);
    }

    #[test]
    fn overlap_is_an_error() {
        let p = IdmParams::default();
        assert!(idm_accel(0.0, 5.0, 5.0, &p).is_err());
        assert!(idm_accel(-1.0, 5.0, 5.0, &p).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_speed_and_gap(
            gap in 0.5f64..200.0,
            v in 0.0f64..30.0,
            dv in 0.0f64..5.0,
            v_lead in 0.0f64..40.0,
            dgap in 0.0f64..50.0,
        ) {
            let p = IdmParams::default();
            let a1 = idm_accel(gap, v, v_lead, &p).unwrap();
            let a2 = idm_accel(gap, v + dv, v_lead, &p).unwrap();
            prop_assert!(a2 <= a1 + 1e-12);
            let a3 = idm_accel(gap + dgap, v, v_lead, &p).unwrap();
            prop_assert!(a3 >= a1 - 1e-12);
        }
    }
}
