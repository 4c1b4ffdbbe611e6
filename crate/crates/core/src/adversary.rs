//! Adaptive adversarial background vehicles.
//!
//! The VUT's minimum 2D time-to-collision is collected over fixed windows.
//! A comfortable window raises the adversarial intensity, a critical one
//! lowers it. At each selection point the eligible vehicle with the largest
//! risk contribution to the VUT receives a maneuver drawn from an
//! intensity-weighted table for the scenario class, with parameters scaled by
//! the intensity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::runlog::RunLog;
use crate::rng::SimRng;
use crate::traffic::DriverOptions;
use crate::world::map::ScenarioMap;
use crate::world::{Control, EntityKind, EntityState, LaneIntent};

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("log contains no ticks")]
    NoData,
    #[error("vehicle under test {0} not present in log")]
    MissingVut(String),
}

/// Earliest time in `[0, horizon]` at which the two centres come within
/// `d_col` under constant velocities, or `None`.
pub fn ttc_2d(a: &EntityState, b: &EntityState, horizon: f64, d_col: f64) -> Option<f64> {
    let (vax, vay) = a.velocity();
    let (vbx, vby) = b.velocity();
    ttc_raw(
        [b.pose.x - a.pose.x, b.pose.y - a.pose.y],
        [vbx - vax, vby - vay],
        horizon,
        d_col,
    )
}

/// TTC from relative position `p` and relative velocity `w`.
pub fn ttc_raw(p: [f64; 2], w: [f64; 2], horizon: f64, d_col: f64) -> Option<f64> {
    let pp = p[0] * p[0] + p[1] * p[1];
    let d2 = d_col * d_col;
    if pp <= d2 {
        return Some(0.0);
    }
    let ww = w[0] * w[0] + w[1] * w[1];
    if ww == 0.0 {
        return None;
    }
    let pw = p[0] * w[0] + p[1] * w[1];
    let disc = pw * pw - ww * (pp - d2);
    if disc < 0.0 {
        return None;
    }
    let t = (-pw - disc.sqrt()) / ww;
    (t >= 0.0 && t <= horizon).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioClass {
    CarFollowing,
    LaneChange,
    UnprotectedLeftTurn,
    Roundabout,
    UnsignalizedIntersection,
    Merge,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    AggressiveOvertake,
    LaneStraddle,
    ContinuousLaneChange,
    EmergencyBrake,
    RushConflict,
    MergeSqueeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub kind: ManeuverKind,
    pub duration: f64,
    /// Braking level for emergency braking (m/s²).
    pub decel: f64,
    /// Minimum acceleration held while squeezing into a merge (m/s²).
    pub accel: f64,
    /// Desired-speed multiplier.
    pub speed_gain: f64,
    /// Lateral offset for straddling (m).
    pub lateral: f64,
}

impl Maneuver {
    pub fn scaled(kind: ManeuverKind, intensity: f64) -> Self {
        let i = intensity.clamp(0.0, 1.0);
        Self {
            kind,
            duration: 3.0 + 3.0 * i,
            decel: 3.0 + 5.0 * i,
            accel: 3.0 * i,
            speed_gain: 1.0 + i / 3.0,
            lateral: 0.5 + i,
        }
    }
}

/// Relative weights of maneuver kinds at a given intensity.
pub fn maneuver_table(class: ScenarioClass, intensity: f64) -> Vec<(ManeuverKind, f64)> {
    let i = intensity.clamp(0.0, 1.0);
    use ManeuverKind::*;
    match class {
        ScenarioClass::Merge => vec![(MergeSqueeze, i), (LaneStraddle, 1.0 - i)],
        ScenarioClass::UnprotectedLeftTurn
        | ScenarioClass::Roundabout
        | ScenarioClass::UnsignalizedIntersection => vec![(RushConflict, i), (LaneStraddle, 1.0 - i)],
        ScenarioClass::CarFollowing | ScenarioClass::LaneChange | ScenarioClass::Generic => vec![
            (LaneStraddle, 1.0 - 0.5 * i),
            (ContinuousLaneChange, 0.5),
            (AggressiveOvertake, i),
            (EmergencyBrake, i),
        ],
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    pub enabled: bool,
    pub t_safe: f64,
    pub t_crit: f64,
    /// Window length in ticks.
    pub window: usize,
    pub step_up: f64,
    pub step_down: f64,
    pub initial_intensity: f64,
    /// Only vehicles within this distance of the VUT are candidates (m).
    pub interaction_range: f64,
    /// Ticks between selection attempts.
    pub select_period: u64,
    pub horizon: f64,
    pub d_col: f64,
    /// Adapt intensity from observed TTC; otherwise hold it fixed.
    #[serde(default = "default_true")]
    pub adaptive: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            t_safe: 4.0,
            t_crit: 2.0,
            window: 50,
            step_up: 0.1,
            step_down: 0.2,
            initial_intensity: 0.5,
            interaction_range: 80.0,
            select_period: 20,
            horizon: 10.0,
            d_col: 4.0,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveManeuver {
    pub maneuver: Maneuver,
    pub started_tick: u64,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialState {
    pub intensity: f64,
    /// Per-tick minimum TTC of the VUT for the current window.
    pub window: Vec<f64>,
    pub active: BTreeMap<String, ActiveManeuver>,
}

impl AdversarialState {
    pub fn new(cfg: &AdversaryConfig) -> Self {
        Self {
            intensity: cfg.initial_intensity.clamp(0.0, 1.0),
            window: Vec::with_capacity(cfg.window),
            active: BTreeMap::new(),
        }
    }

    /// Record one tick's minimum TTC (`None` = no threat). When the window
    /// fills, intensity is updated and a new window starts.
    pub fn observe(&mut self, min_ttc: Option<f64>, cfg: &AdversaryConfig) -> bool {
        self.window.push(min_ttc.unwrap_or(cfg.horizon).min(cfg.horizon));
        if self.window.len() < cfg.window.max(1) {
            return false;
        }
        let m = self.window.iter().copied().fold(f64::INFINITY, f64::min);
        if cfg.adaptive {
            self.intensity = update_intensity(self.intensity, m, cfg);
        }
        self.window.clear();
        true
    }
}

/// Intensity after a full window whose minimum TTC was `window_min_ttc`.
pub fn update_intensity(intensity: f64, window_min_ttc: f64, cfg: &AdversaryConfig) -> f64 {
    let next = if window_min_ttc > cfg.t_safe {
        intensity + cfg.step_up
    } else if window_min_ttc < cfg.t_crit {
        intensity - cfg.step_down
    } else {
        intensity
    };
    next.clamp(0.0, 1.0)
}

/// Pick the target (largest contribution, ties by id) and a maneuver for
/// it. `candidates` holds eligible vehicles and their risk contributions.
pub fn select_maneuver(
    intensity: f64,
    class: ScenarioClass,
    candidates: &BTreeMap<String, f64>,
    rng: &mut SimRng,
) -> Option<(String, Maneuver)> {
    let (target, _) = candidates
        .iter()
        .fold(None::<(&String, f64)>, |best, (id, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((id, c)),
        })?;
    let table = maneuver_table(class, intensity);
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut u = rng.uniform() * total;
    let mut kind = table[0].0;
    for (k, w) in &table {
        if *w <= 0.0 {
            continue;
        }
        kind = *k;
        if u < *w {
            break;
        }
        u -= w;
    }
    Some((target.clone(), Maneuver::scaled(kind, intensity)))
}

/// Driver options the maneuver imposes on the baseline driver.
pub fn maneuver_options(m: &Maneuver) -> DriverOptions {
    let mut o = DriverOptions {
        lane_changes: false,
        ..DriverOptions::default()
    };
    match m.kind {
        ManeuverKind::RushConflict | ManeuverKind::MergeSqueeze => {
            o.ignore_conflicts = true;
            o.speed_factor = m.speed_gain;
        }
        ManeuverKind::AggressiveOvertake => o.speed_factor = 1.0 + 1.5 * (m.speed_gain - 1.0),
        _ => {}
    }
    o
}

/// Control of an adversarial vehicle, given the baseline control computed
/// with [`maneuver_options`].
pub fn maneuver_control(
    m: &ActiveManeuver,
    me: &EntityState,
    vut: Option<&EntityState>,
    map: &ScenarioMap,
    base: Control,
) -> Control {
    let mv = &m.maneuver;
    let lane = me.lane.as_deref().and_then(|l| map.lane(l));
    // Side of the VUT relative to this vehicle: +1 left, -1 right.
    let vut_side = vut.map_or(1.0, |v| {
        let (c, s) = (me.pose.heading.cos(), me.pose.heading.sin());
        let lat = -(v.pose.x - me.pose.x) * s + (v.pose.y - me.pose.y) * c;
        if lat >= 0.0 { 1.0 } else { -1.0 }
    });
    let toward = |side: f64| -> LaneIntent {
        let Some(l) = lane else { return LaneIntent::Keep };
        match (side > 0.0, &l.left, &l.right) {
            (true, Some(_), _) => LaneIntent::Left,
            (false, _, Some(_)) => LaneIntent::Right,
            (_, Some(_), _) => LaneIntent::Left,
            (_, _, Some(_)) => LaneIntent::Right,
            _ => LaneIntent::Keep,
        }
    };
    let mut c = Control {
        accel: base.accel,
        intent: LaneIntent::Keep,
        lateral: None,
    };
    match mv.kind {
        ManeuverKind::EmergencyBrake => c.accel = -mv.decel,
        ManeuverKind::LaneStraddle => c.lateral = Some(vut_side * mv.lateral),
        ManeuverKind::ContinuousLaneChange => {
            if me.lane_change.is_none() {
                // Alternate sides on every completed change.
                let side = if (m.elapsed / crate::world::LANE_CHANGE_TIME) as u64 % 2 == 0 { vut_side } else { -vut_side };
                c.intent = toward(side);
            }
        }
        ManeuverKind::AggressiveOvertake => {
            if m.elapsed == 0.0 && me.lane_change.is_none() {
                c.intent = toward(vut_side);
            }
        }
        ManeuverKind::MergeSqueeze => {
            if base.accel >= 0.0 {
                c.accel = base.accel.max(mv.accel);
            }
        }
        ManeuverKind::RushConflict => {}
    }
    c
}

/// Minimum TTC of `vut` against every other moving entity in a tick.
pub fn min_ttc(entities: &BTreeMap<String, EntityState>, vut: &EntityState, horizon: f64, d_col: f64) -> Option<f64> {
    entities
        .values()
        .filter(|o| o.id != vut.id && o.kind != EntityKind::Rsu && !o.finished)
        .filter_map(|o| ttc_2d(vut, o, horizon, d_col))
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))))
}

/// Fraction of logged ticks in which the VUT's minimum TTC is below
/// `threshold`.
pub fn hazard_fraction(log: &RunLog, threshold: f64) -> Result<f64, AdversaryError> {
    let vut_id = &log.header.spec.vut;
    let ticks = &log.ticks;
    if ticks.is_empty() {
        return Err(AdversaryError::NoData);
    }
    let cfg = AdversaryConfig::default();
    let mut hazardous = 0usize;
    for t in ticks {
        let vut = t
            .entities
            .get(vut_id)
            .ok_or_else(|| AdversaryError::MissingVut(vut_id.clone()))?;
        if min_ttc(&t.entities, vut, cfg.horizon, cfg.d_col).is_some_and(|m| m < threshold) {
            hazardous += 1;
        }
    }
    Ok(hazardous as f64 / ticks.len() as f64)
}

/// Hazard fraction of a per-tick minimum TTC series.
pub fn hazard_fraction_of(min_ttcs: &[Option<f64>], threshold: f64) -> Result<f64, AdversaryError> {
    if min_ttcs.is_empty() {
        return Err(AdversaryError::NoData);
    }
    let n = min_ttcs.iter().filter(|t| t.is_some_and(|t| t < threshold)).count();
    Ok(n as f64 / min_ttcs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Pose;
    use proptest::prelude::*;

    fn car(x: f64, y: f64, heading: f64, speed: f64) -> EntityState {
        EntityState::free("c", EntityKind::Background, Pose::new(x, y, heading), speed)
    }

    #[test]
    fn head_on_closing_example() {
        let a = car(0.0, 0.0, 0.0, 10.0);
        let b = car(50.0, 0.0, 0.0, 0.0);
        let t = ttc_2d(&a, &b, 10.0, 4.0).unwrap();
        assert!((t - 4.6).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_diverging_have_no_ttc() {
        let a = car(0.0, 0.0, 0.0, 10.0);
        let b = car(0.0, 10.0, 0.0, 10.0);
        assert_eq!(ttc_2d(&a, &b, 10.0, 4.0), None);
        let c = car(-20.0, 0.0, std::f64::consts::PI, 5.0);
        assert_eq!(ttc_2d(&a, &c, 10.0, 4.0), None);
    }

    #[test]
    fn already_close_is_zero() {
        let a = car(0.0, 0.0, 0.0, 10.0);
        let b = car(3.0, 0.0, 1.0, 0.0);
        assert_eq!(ttc_2d(&a, &b, 10.0, 4.0), Some(0.0));
    }

    #[test]
    fn intensity_rules() {
        let cfg = AdversaryConfig::default();
        assert_eq!(update_intensity(1.0, 9.0, &cfg), 1.0);
        assert!((update_intensity(0.5, 5.0, &cfg) - 0.6).abs() < 1e-12);
        assert_eq!(update_intensity(0.1, 1.0, &cfg), 0.0);
        assert_eq!(update_intensity(0.5, 3.0, &cfg), 0.5);
    }

    #[test]
    fn window_updates_once_per_window() {
        let cfg = AdversaryConfig::default();
        let mut s = AdversarialState::new(&cfg);
        for _ in 0..49 {
            assert!(!s.observe(None, &cfg));
        }
        assert!(s.observe(None, &cfg));
        assert!((s.intensity - 0.6).abs() < 1e-12);
        assert!(s.window.is_empty());
    }

    #[test]
    fn zero_intensity_never_brakes_hard() {
        let mut rng = SimRng::new(1, 4);
        let cands = BTreeMap::from([("x".to_string(), 1.0)]);
        for _ in 0..1000 {
            let (_, m) = select_maneuver(0.0, ScenarioClass::CarFollowing, &cands, &mut rng).unwrap();
            assert_ne!(m.kind, ManeuverKind::EmergencyBrake);
            assert_ne!(m.kind, ManeuverKind::AggressiveOvertake);
        }
    }

    #[test]
    fn merge_at_full_intensity_squeezes_hard() {
        let mut rng = SimRng::new(1, 4);
        let cands = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 2.0), ("c".to_string(), 2.0)]);
        let (target, m) = select_maneuver(1.0, ScenarioClass::Merge, &cands, &mut rng).unwrap();
        assert_eq!(target, "b");
        assert_eq!(m.kind, ManeuverKind::MergeSqueeze);
        assert_eq!(m.accel, 3.0);
    }

    #[test]
    fn rush_speeds_up_by_a_third() {
        // 9 km/h -> 12 km/h at full intensity.
        let m = Maneuver::scaled(ManeuverKind::RushConflict, 1.0);
        assert!((9.0 * m.speed_gain - 12.0).abs() < 1e-12);
        assert_eq!(Maneuver::scaled(ManeuverKind::EmergencyBrake, 1.0).decel, 8.0);
        assert!(select_maneuver(1.0, ScenarioClass::Merge, &BTreeMap::new(), &mut SimRng::new(1, 1)).is_none());
    }

    #[test]
    fn hazard_fraction_series() {
        assert!(hazard_fraction_of(&[], 2.5).is_err());
        let mut s = vec![None; 1000];
        assert_eq!(hazard_fraction_of(&s, 2.5).unwrap(), 0.0);
        for t in s.iter_mut().take(58) {
            *t = Some(1.0);
        }
        assert!((hazard_fraction_of(&s, 2.5).unwrap() - 0.058).abs() < 1e-12);
        assert_eq!(hazard_fraction_of(&[Some(1.0); 10], 2.5).unwrap(), 1.0);
    }

    fn brute_force(p: [f64; 2], w: [f64; 2], horizon: f64, d: f64) -> Option<f64> {
        let steps = (horizon * 1000.0).round() as i64;
        (0..=steps)
            .map(|k| k as f64 / 1000.0)
            .find(|t| (p[0] + w[0] * t).hypot(p[1] + w[1] * t) <= d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_millisecond_oracle(
            px in -60.0f64..60.0, py in -60.0f64..60.0,
            wx in -25.0f64..25.0, wy in -25.0f64..25.0,
        ) {
            let (h, d) = (10.0, 4.0);
            let fast = ttc_raw([px, py], [wx, wy], h, d);
            let slow = brute_force([px, py], [wx, wy], h, d);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-3 + 1e-9, "{a} vs {b}"),
                (None, None) => {}
                // Grazing contacts shorter than the sampling step.
                (Some(a), None) => {
                    let (qx, qy) = (px + wx * a, py + wy * a);
                    prop_assert!((qx.hypot(qy) - d).abs() < 1e-6);
                    let closest = ((a * 1000.0).floor() / 1000.0, (a * 1000.0).ceil() / 1000.0);
                    let miss = |t: f64| (px + wx * t).hypot(py + wy * t) > d;
                    prop_assert!(miss(closest.0) && miss(closest.1) || a > h - 1e-3);
                }
                (None, Some(b)) => prop_assert!(false, "oracle found {b}"),
            }
        }

        #[test]
        fn symmetric(
            ax in -50.0f64..50.0, ay in -50.0f64..50.0, ah in -3.1f64..3.1, av in 0.0f64..20.0,
            bx in -50.0f64..50.0, by in -50.0f64..50.0, bh in -3.1f64..3.1, bv in 0.0f64..20.0,
        ) {
            let a = car(ax, ay, ah, av);
            let b = car(bx, by, bh, bv);
            prop_assert_eq!(ttc_2d(&a, &b, 10.0, 4.0), ttc_2d(&b, &a, 10.0, 4.0));
            let zero = ttc_2d(&a, &b, 10.0, 4.0) == Some(0.0);
            prop_assert_eq!(zero, a.pose.distance(&b.pose) <= 4.0);
        }

        #[test]
        fn intensity_monotone_and_bounded(i in 0.0f64..=1.0, t1 in 0.0f64..10.0, t2 in 0.0f64..10.0) {
            let cfg = AdversaryConfig::default();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = update_intensity(i, lo, &cfg);
            let b = update_intensity(i, hi, &cfg);
            prop_assert!(a <= b);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        }
    }
}
