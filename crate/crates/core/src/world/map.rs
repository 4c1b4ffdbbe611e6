//! Scenario map: lanes as polylines, conflict points, signal plans and zones.
//!
//! Map files are versioned TOML documents. A lane is either an explicit list
//! of points, an arc, or points followed by an arc. Conflict points between
//! lanes are derived from the geometry unless `auto_conflicts = false`, and
//! can always be declared explicitly.
//!
//! ```toml
//! version = 1
//! name = "straight"
//!
//! [[lanes]]
//! id = "main-0"
//! speed_limit = 16.7
//! points = [[0.0, 0.0], [600.0, 0.0]]
//! left = "main-1"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cooperation::spat::SignalPlan;

pub const MAP_VERSION: u32 = 1;

/// Lanes whose end points lie closer than this are treated as merging.
const JOIN_TOLERANCE: f64 = 0.5;
/// Intersections this close to a lane end are connections, not conflicts.
const ENDPOINT_GUARD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("failed to read map {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("map parse error: {0}")]
    Parse(String),
    #[error("unsupported map version {0} (expected {MAP_VERSION})")]
    Version(u32),
    #[error("lane {0}: {1}")]
    Lane(String, String),
    #[error("duplicate lane id {0}")]
    DuplicateLane(String),
    #[error("{field} references unknown lane {lane}")]
    UnknownLane { field: String, lane: String },
    #[error("signal {0}: {1}")]
    Signal(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    /// Paths cross; one vehicle must clear before the other enters.
    Crossing,
    /// Paths join; vehicles zip into a single stream.
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPoint {
    pub id: String,
    pub lane_a: String,
    pub station_a: f64,
    pub lane_b: String,
    pub station_b: f64,
    pub kind: ConflictKind,
    /// Lane with right of way, if the junction is priority-controlled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<String>,
    /// Radius of the conflict area around the crossing point.
    #[serde(default = "default_conflict_radius")]
    pub radius: f64,
}

fn default_conflict_radius() -> f64 {
    2.5
}

impl ConflictPoint {
    /// Station of this conflict on `lane`, if the lane takes part in it.
    pub fn station_on(&self, lane: &str) -> Option<f64> {
        if self.lane_a == lane {
            Some(self.station_a)
        } else if self.lane_b == lane {
            Some(self.station_b)
        } else {
            None
        }
    }

    pub fn other_lane(&self, lane: &str) -> Option<&str> {
        if self.lane_a == lane {
            Some(&self.lane_b)
        } else if self.lane_b == lane {
            Some(&self.lane_a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneKind {
    Occlusion,
    Construction,
    Congestion,
}

/// A circular area declared by the scenario author.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub kind: ZoneKind,
    pub center: [f64; 2],
    pub radius: f64,
}

impl Zone {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).hypot(y - self.center[1]) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArcDoc {
    center: [f64; 2],
    radius: f64,
    start_deg: f64,
    end_deg: f64,
    #[serde(default = "default_segments")]
    segments: usize,
}

fn default_segments() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LaneDoc {
    id: String,
    #[serde(default = "default_lane_width")]
    width: f64,
    speed_limit: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arc: Option<ArcDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    left: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right: Option<String>,
}

fn default_lane_width() -> f64 {
    3.5
}

fn default_true() -> bool {
    true
}

/// On-disk shape of a map document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapDoc {
    version: u32,
    name: String,
    #[serde(default = "default_true")]
    auto_conflicts: bool,
    lanes: Vec<LaneDoc>,
    #[serde(default)]
    conflict_points: Vec<ConflictPoint>,
    #[serde(default)]
    signals: Vec<SignalPlan>,
    #[serde(default)]
    zones: Vec<Zone>,
}

/// A lane centre line with width and speed limit.
#[derive(Debug, Clone)]
pub struct Lane {
    pub id: String,
    pub width: f64,
    pub speed_limit: f64,
    pub points: Vec<[f64; 2]>,
    pub left: Option<String>,
    pub right: Option<String>,
    cumulative: Vec<f64>,
}

impl PartialEq for Lane {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.width == other.width
            && self.speed_limit == other.speed_limit
            && self.points == other.points
            && self.left == other.left
            && self.right == other.right
    }
}

impl Lane {
    pub fn new(
        id: impl Into<String>,
        width: f64,
        speed_limit: f64,
        points: Vec<[f64; 2]>,
    ) -> Result<Self, MapError> {
        let id = id.into();
        if points.len() < 2 {
            return Err(MapError::Lane(id, "polyline needs at least 2 points".into()));
        }
        if !(speed_limit > 0.0) {
            return Err(MapError::Lane(id, "speed limit must be positive".into()));
        }
        if !(width > 0.0) {
            return Err(MapError::Lane(id, "width must be positive".into()));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(MapError::Lane(id, "non-finite point".into()));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let seg = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if seg <= 1e-9 {
                return Err(MapError::Lane(id, "repeated point in polyline".into()));
            }
            let last = *cumulative.last().unwrap();
            cumulative.push(last + seg);
        }
        Ok(Self {
            id,
            width,
            speed_limit,
            points,
            left: None,
            right: None,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment_at(&self, station: f64) -> usize {
        let n = self.points.len() - 1;
        match self
            .cumulative
            .binary_search_by(|c| c.total_cmp(&station))
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Position and heading at `station`; beyond either end the first/last
    /// segment is extended linearly.
    pub fn pose_at(&self, station: f64) -> (f64, f64, f64) {
        let seg = self.segment_at(station);
        let [x0, y0] = self.points[seg];
        let [x1, y1] = self.points[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let t = (station - self.cumulative[seg]) / len;
        let heading = (y1 - y0).atan2(x1 - x0);
        (x0 + t * (x1 - x0), y0 + t * (y1 - y0), heading)
    }

    /// Station of the closest point on the centre line, and the signed
    /// lateral offset (positive to the left).
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len2 = dx * dx + dy * dy;
            let t = (((x - w[0][0]) * dx + (y - w[0][1]) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (w[0][0] + t * dx, w[0][1] + t * dy);
            let d = (x - px).hypot(y - py);
            if d < best.0 {
                let cross = dx * (y - w[0][1]) - dy * (x - w[0][0]);
                let station = self.cumulative[i] + t * len2.sqrt();
                best = (d, station, d.copysign(cross));
            }
        }
        (best.1, best.2)
    }
}

/// The static world: lanes, conflicts, signals and declared zones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapDoc", into = "MapDoc")]
pub struct ScenarioMap {
    pub name: String,
    lanes: Vec<Lane>,
    index: BTreeMap<String, usize>,
    pub conflict_points: Vec<ConflictPoint>,
    pub signals: Vec<SignalPlan>,
    pub zones: Vec<Zone>,
}

impl TryFrom<MapDoc> for ScenarioMap {
    type Error = MapError;

    fn try_from(doc: MapDoc) -> Result<Self, MapError> {
        if doc.version != MAP_VERSION {
            return Err(MapError::Version(doc.version));
        }
        let mut lanes = Vec::with_capacity(doc.lanes.len());
        for ld in doc.lanes {
            let mut points = ld.points.clone();
            if let Some(arc) = &ld.arc {
                let arc_pts = arc_points(arc);
                let joined = points.last().zip(arc_pts.first()).is_some_and(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]) < 1e-6);
                points.extend(arc_pts.into_iter().skip(usize::from(joined)));
            }
            let mut lane = Lane::new(ld.id, ld.width, ld.speed_limit, points)?;
            lane.left = ld.left;
            lane.right = ld.right;
            lanes.push(lane);
        }
        let mut map = ScenarioMap::new(doc.name, lanes)?;
        let mut conflicts = if doc.auto_conflicts {
            map.derive_conflicts()
        } else {
            Vec::new()
        };
        for cp in doc.conflict_points {
            // An explicit declaration overrides the derived one for the pair.
            conflicts.retain(|c| {
                !((c.lane_a == cp.lane_a && c.lane_b == cp.lane_b)
                    || (c.lane_a == cp.lane_b && c.lane_b == cp.lane_a))
            });
            conflicts.push(cp);
        }
        map.conflict_points = conflicts;
        map.signals = doc.signals;
        map.zones = doc.zones;
        map.validate()?;
        Ok(map)
    }
}

impl From<ScenarioMap> for MapDoc {
    fn from(map: ScenarioMap) -> Self {
        MapDoc {
            version: MAP_VERSION,
            name: map.name,
            auto_conflicts: false,
            lanes: map
                .lanes
                .into_iter()
                .map(|l| LaneDoc {
                    id: l.id,
                    width: l.width,
                    speed_limit: l.speed_limit,
                    points: l.points,
                    arc: None,
                    left: l.left,
                    right: l.right,
                })
                .collect(),
            conflict_points: map.conflict_points,
            signals: map.signals,
            zones: map.zones,
        }
    }
}

fn arc_points(arc: &ArcDoc) -> Vec<[f64; 2]> {
    let n = arc.segments.max(1);
    let (a0, a1) = (arc.start_deg.to_radians(), arc.end_deg.to_radians());
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            [
                arc.center[0] + arc.radius * a.cos(),
                arc.center[1] + arc.radius * a.sin(),
            ]
        })
        .collect()
}

impl ScenarioMap {
    pub fn new(name: impl Into<String>, lanes: Vec<Lane>) -> Result<Self, MapError> {
        let mut index = BTreeMap::new();
        for (i, lane) in lanes.iter().enumerate() {
            if index.insert(lane.id.clone(), i).is_some() {
                return Err(MapError::DuplicateLane(lane.id.clone()));
            }
        }
        let map = Self {
            name: name.into(),
            lanes,
            index,
            conflict_points: Vec::new(),
            signals: Vec::new(),
            zones: Vec::new(),
        };
        Ok(map)
    }

    pub fn from_toml(text: &str) -> Result<Self, MapError> {
        toml::from_str::<ScenarioMap>(text).map_err(|e| MapError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.index.get(id).map(|&i| &self.lanes[i])
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn has_lane(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Conflict points in which `lane` takes part.
    pub fn conflicts_on<'a>(&'a self, lane: &'a str) -> impl Iterator<Item = &'a ConflictPoint> + 'a {
        self.conflict_points
            .iter()
            .filter(move |c| c.lane_a == lane || c.lane_b == lane)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        for lane in &self.lanes {
            for (field, target) in [("left", &lane.left), ("right", &lane.right)] {
                if let Some(t) = target {
                    if !self.has_lane(t) {
                        return Err(MapError::UnknownLane {
                            field: format!("lanes.{}.{field}", lane.id),
                            lane: t.clone(),
                        });
                    }
                }
            }
        }
        for cp in &self.conflict_points {
            for lane in [&cp.lane_a, &cp.lane_b] {
                if !self.has_lane(lane) {
                    return Err(MapError::UnknownLane {
                        field: format!("conflict_points.{}", cp.id),
                        lane: lane.clone(),
                    });
                }
            }
            if let Some(p) = &cp.priority {
                if p != &cp.lane_a && p != &cp.lane_b {
                    return Err(MapError::UnknownLane {
                        field: format!("conflict_points.{}.priority", cp.id),
                        lane: p.clone(),
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for sig in &self.signals {
            if !seen.insert(sig.id.clone()) {
                return Err(MapError::Signal(sig.id.clone(), "duplicate signal id".into()));
            }
            sig.validate()
                .map_err(|e| MapError::Signal(sig.id.clone(), e))?;
            for head in &sig.heads {
                if !self.has_lane(&head.lane) {
                    return Err(MapError::UnknownLane {
                        field: format!("signals.{}.heads", sig.id),
                        lane: head.lane.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Crossing and merge conflicts implied by the lane geometry.
    fn derive_conflicts(&self) -> Vec<ConflictPoint> {
        let mut out = Vec::new();
        for (i, a) in self.lanes.iter().enumerate() {
            for b in &self.lanes[i + 1..] {
                if a.left.as_deref() == Some(b.id.as_str())
                    || a.right.as_deref() == Some(b.id.as_str())
                {
                    continue;
                }
                let a_end = *a.points.last().unwrap();
                let b_end = *b.points.last().unwrap();
                if dist(a_end, b_end) < JOIN_TOLERANCE {
                    out.push(ConflictPoint {
                        id: format!("cp-{}-{}", a.id, b.id),
                        lane_a: a.id.clone(),
                        station_a: a.length(),
                        lane_b: b.id.clone(),
                        station_b: b.length(),
                        kind: ConflictKind::Merge,
                        priority: None,
                        radius: default_conflict_radius(),
                    });
                    continue;
                }
                if let Some((sa, sb)) = first_crossing(a, b) {
                    let near_end = |lane: &Lane, s: f64| {
                        s < ENDPOINT_GUARD || s > lane.length() - ENDPOINT_GUARD
                    };
                    if near_end(a, sa) || near_end(b, sb) {
                        continue;
                    }
                    out.push(ConflictPoint {
                        id: format!("cp-{}-{}", a.id, b.id),
                        lane_a: a.id.clone(),
                        station_a: sa,
                        lane_b: b.id.clone(),
                        station_b: sb,
                        kind: ConflictKind::Crossing,
                        priority: None,
                        radius: default_conflict_radius(),
                    });
                }
            }
        }
        out
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// First intersection of two polylines, as stations on each.
fn first_crossing(a: &Lane, b: &Lane) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (i, sa) in a.points.windows(2).enumerate() {
        for (j, sb) in b.points.windows(2).enumerate() {
            if let Some((t, u)) = segment_intersection(sa[0], sa[1], sb[0], sb[1]) {
                let st_a = a.cumulative[i] + t * dist(sa[0], sa[1]);
                let st_b = b.cumulative[j] + u * dist(sb[0], sb[1]);
                if best.is_none_or(|(s, _)| st_a < s) {
                    best = Some((st_a, st_b));
                }
            }
        }
    }
    best
}

fn segment_intersection(p0: [f64; 2], p1: [f64; 2], q0: [f64; 2], q1: [f64; 2]) -> Option<(f64, f64)> {
    let r = [p1[0] - p0[0], p1[1] - p0[1]];
    let s = [q1[0] - q0[0], q1[1] - q0[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = [q0[0] - p0[0], q0[1] - p0[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some((t, u))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CROSS: &str = r#"
version = 1
name = "cross"

[[lanes]]
id = "we"
speed_limit = 10.0
points = [[-50.0, 0.0], [50.0, 0.0]]

[[lanes]]
id = "sn"
speed_limit = 10.0
points = [[0.0, -50.0], [0.0, 50.0]]

[[lanes]]
id = "ramp"
speed_limit = 10.0
points = [[-50.0, -20.0], [50.0, 0.0]]
"#;

    #[test]
    fn derives_crossing_and_merge_conflicts() {
        let map = ScenarioMap::from_toml(CROSS).unwrap();
        let cross = map
            .conflict_points
            .iter()
            .find(|c| c.lane_a == "we" && c.lane_b == "sn")
            .unwrap();
        assert_eq!(cross.kind, ConflictKind::Crossing);
        assert!((cross.station_a - 50.0).abs() < 1e-9);
        assert!((cross.station_b - 50.0).abs() < 1e-9);
        let merge = map
            .conflict_points
            .iter()
            .find(|c| c.lane_b == "ramp" && c.lane_a == "we")
            .unwrap();
        assert_eq!(merge.kind, ConflictKind::Merge);
    }

    #[test]
    fn pose_and_projection_agree() {
        let lane = Lane::new("l", 3.5, 10.0, vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
        assert!((lane.length() - 20.0).abs() < 1e-12);
        let (x, y, h) = lane.pose_at(15.0);
        assert!((x - 10.0).abs() < 1e-12 && (y - 5.0).abs() < 1e-12);
        assert!((h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let (s, lat) = lane.project(9.0, 5.0);
        assert!((s - 15.0).abs() < 1e-12);
        assert!((lat - 1.0).abs() < 1e-12);
        // Past the end the last segment is extended.
        let (x, y, _) = lane.pose_at(22.0);
        assert!((x - 10.0).abs() < 1e-12 && (y - 12.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_lanes() {
        assert!(Lane::new("x", 3.5, 10.0, vec![[0.0, 0.0]]).is_err());
        assert!(Lane::new("x", 3.5, 0.0, vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn resolved_map_round_trips() {
        let map = ScenarioMap::from_toml(CROSS).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        let back: ScenarioMap = serde_json::from_str(&json).unwrap();
        assert_eq!(map, back);
        let text = toml::to_string(&map).unwrap();
        assert_eq!(ScenarioMap::from_toml(&text).unwrap(), map);
    }

    #[test]
    fn arc_lanes_are_expanded() {
        let doc = r#"
version = 1
name = "arc"
[[lanes]]
id = "turn"
speed_limit = 8.0
points = [[0.0, -20.0]]
arc = { center = [10.0, -10.0], radius = 10.0, start_deg = 180.0, end_deg = 90.0, segments = 8 }
"#;
        let map = ScenarioMap::from_toml(doc).unwrap();
        let lane = map.lane("turn").unwrap();
        assert_eq!(lane.points.len(), 10);
        let quarter = std::f64::consts::FRAC_PI_2 * 10.0;
        assert!(lane.length() > 10.0 + quarter * 0.99);
    }

    #[test]
    fn unknown_neighbor_is_rejected() {
        let doc = r#"
version = 1
name = "bad"
[[lanes]]
id = "a"
speed_limit = 8.0
points = [[0.0, 0.0], [1.0, 0.0]]
left = "nope"
"#;
        assert!(matches!(
            ScenarioMap::from_toml(doc),
            Err(MapError::Parse(msg)) if msg.contains("nope")
        ));
    }
}
