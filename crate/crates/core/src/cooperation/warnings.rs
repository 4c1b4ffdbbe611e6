//! Roadside (MEC) safety warnings derived from the perceived scene.

use serde::{Deserialize, Serialize};

use crate::adversary::ttc_2d;
use crate::world::map::{ScenarioMap, ZoneKind};
use crate::world::{EntityKind, EntityState, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    Construction,
    VruAlert,
    NlosHazard,
    Congestion,
    GreenWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub kind: WarningKind,
    pub target: String,
    pub position: [f64; 2],
    pub advisory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

/// Geometry of the warning rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarningConfig {
    /// Pedestrians this far ahead (m) inside the corridor trigger an alert.
    pub vru_lookahead: f64,
    /// Half-width of the corridor ahead of the ego vehicle (m).
    pub corridor_half_width: f64,
    /// TTC below which an occluded vehicle is a hazard (s).
    pub nlos_ttc: f64,
    pub d_col: f64,
    /// Zones whose edge is within this distance ahead are announced (m).
    pub zone_lookahead: f64,
}

impl Default for WarningConfig {
    fn default() -> Self {
        Self {
            vru_lookahead: 50.0,
            corridor_half_width: 2.5,
            nlos_ttc: 6.0,
            d_col: 4.0,
            zone_lookahead: 150.0,
        }
    }
}

/// Roadside unit coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub center: [f64; 2],
    pub range: f64,
}

impl Coverage {
    pub fn covers(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).hypot(y - self.center[1]) <= self.range
    }
}

/// Position of (x, y) in the ego frame: (longitudinal, lateral).
fn ego_frame(ego: &EntityState, x: f64, y: f64) -> (f64, f64) {
    let (dx, dy) = (x - ego.pose.x, y - ego.pose.y);
    let (c, s) = (ego.pose.heading.cos(), ego.pose.heading.sin());
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Warnings for `ego` from what the roadside unit perceives.
pub fn mec_warnings(
    world: &WorldState,
    map: &ScenarioMap,
    coverage: &Coverage,
    ego: &EntityState,
    cfg: &WarningConfig,
) -> Vec<Warning> {
    let mut out = Vec::new();
    if !coverage.covers(ego.pose.x, ego.pose.y) {
        return out;
    }
    for other in world.entities.values() {
        if other.id == ego.id || !coverage.covers(other.pose.x, other.pose.y) {
            continue;
        }
        if other.kind == EntityKind::Pedestrian {
            let (lon, lat) = ego_frame(ego, other.pose.x, other.pose.y);
            if lon > 0.0 && lon <= cfg.vru_lookahead && lat.abs() <= cfg.corridor_half_width {
                out.push(Warning {
                    kind: WarningKind::VruAlert,
                    target: ego.id.clone(),
                    position: [other.pose.x, other.pose.y],
                    advisory: format!("pedestrian {} {lon:.0} m ahead", other.id),
                    speed: None,
                });
            }
        } else if other.kind.is_vehicle()
            && map
                .zones
                .iter()
                .any(|z| z.kind == ZoneKind::Occlusion && z.contains(other.pose.x, other.pose.y))
        {
            if let Some(t) = ttc_2d(ego, other, cfg.nlos_ttc, cfg.d_col) {
                if t < cfg.nlos_ttc {
                    out.push(Warning {
                        kind: WarningKind::NlosHazard,
                        target: ego.id.clone(),
                        position: [other.pose.x, other.pose.y],
                        advisory: format!("hidden vehicle {} on conflicting path, TTC {t:.1} s", other.id),
                        speed: None,
                    });
                }
            }
        }
    }
    for z in &map.zones {
        let kind = match z.kind {
            ZoneKind::Construction => WarningKind::Construction,
            ZoneKind::Congestion => WarningKind::Congestion,
            ZoneKind::Occlusion => continue,
        };
        let (lon, lat) = ego_frame(ego, z.center[0], z.center[1]);
        let edge = lon.hypot(lat) - z.radius;
        if lon > -z.radius && edge <= cfg.zone_lookahead {
            out.push(Warning {
                kind,
                target: ego.id.clone(),
                position: z.center,
                advisory: format!("{} zone {} ahead in {:.0} m", if kind == WarningKind::Construction { "construction" } else { "congestion" }, z.id, edge.max(0.0)),
                speed: None,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::map::{Lane, Zone};
    use crate::world::Pose;

    fn setup(zones: Vec<Zone>) -> (ScenarioMap, WorldState, Coverage) {
        let lane = Lane::new("a", 3.5, 15.0, vec![[0.0, 0.0], [500.0, 0.0]]).unwrap();
        let mut map = ScenarioMap::new("m", vec![lane]).unwrap();
        map.zones = zones;
        let mut w = WorldState::new(1, 0.1);
        w.spawn(EntityState::free("ego", EntityKind::VirtualCav, Pose::new(0.0, 0.0, 0.0), 10.0))
            .unwrap();
        (map, w, Coverage { center: [0.0, 0.0], range: 300.0 })
    }

    #[test]
    fn empty_scene_gives_nothing() {
        let (map, w, cov) = setup(vec![]);
        let ego = w.entities["ego"].clone();
        assert!(mec_warnings(&w, &map, &cov, &ego, &WarningConfig::default()).is_empty());
    }

    #[test]
    fn pedestrian_ahead_in_corridor() {
        let (map, mut w, cov) = setup(vec![]);
        w.spawn(EntityState::free("p", EntityKind::Pedestrian, Pose::new(20.0, 1.0, 0.0), 0.0))
            .unwrap();
        let ego = w.entities["ego"].clone();
        let got = mec_warnings(&w, &map, &cov, &ego, &WarningConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].kind, WarningKind::VruAlert);
    }

    #[test]
    fn occluded_crossing_vehicle() {
        let zone = Zone {
            id: "wall".into(),
            kind: ZoneKind::Occlusion,
            center: [40.0, -30.0],
            radius: 10.0,
        };
        let (map, mut w, cov) = setup(vec![zone]);
        // Crossing from the right: reaches the ego path at ~4 s.
        w.spawn(EntityState::free(
            "hid",
            EntityKind::Background,
            Pose::new(40.0, -30.0, std::f64::consts::FRAC_PI_2),
            7.5,
        ))
        .unwrap();
        let ego = w.entities["ego"].clone();
        let got = mec_warnings(&w, &map, &cov, &ego, &WarningConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].kind, WarningKind::NlosHazard);
        let t = ttc_2d(&ego, &w.entities["hid"], 6.0, 4.0).unwrap();
        assert!(t > 3.0 && t < 5.0);
    }

    #[test]
    fn out_of_coverage_is_silent() {
        let (map, mut w, mut cov) = setup(vec![]);
        w.spawn(EntityState::free("p", EntityKind::Pedestrian, Pose::new(20.0, 0.0, 0.0), 0.0))
            .unwrap();
        cov.center = [2000.0, 0.0];
        let ego = w.entities["ego"].clone();
        assert!(mec_warnings(&w, &map, &cov, &ego, &WarningConfig::default()).is_empty());
    }

    #[test]
    fn declared_zones_are_announced() {
        let zone = Zone {
            id: "works".into(),
            kind: ZoneKind::Construction,
            center: [120.0, 0.0],
            radius: 20.0,
        };
        let (map, w, cov) = setup(vec![zone]);
        let ego = w.entities["ego"].clone();
        let got = mec_warnings(&w, &map, &cov, &ego, &WarningConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].kind, WarningKind::Construction);
    }
}
