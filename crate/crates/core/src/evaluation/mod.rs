//! Algorithm scoring over five dimensions.
//!
//! A scheme lists metrics, each bound to a dimension with `(worst, best)`
//! anchors and a weight. Raw values map linearly onto `[0, 100]`. Metrics
//! that do not apply to a run (no shared conflict area, say) are dropped
//! and the remaining weights of their dimension renormalized. The overall
//! score is a weighted mean of the dimension scores, equal weights unless
//! the scheme says otherwise.

mod compare;
mod diagnose;
mod extract;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::runlog::RunLog;
use crate::harness::scenario::{AdapterKind, ControlSource};

pub use compare::{compare, Axis, RankRow, RankingTable};
pub use diagnose::{diagnose, Condition, DiagnosticReport, Finding, Op, Rule, Rulebase, Severity};
pub use extract::{conflict_passages, extract, pet, Passage, PetResult, METRIC_NAMES};

pub const SCHEME_VERSION: u32 = 1;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("unsupported scheme version {0}")]
    Version(u32),
    #[error("no metric for dimension {0}")]
    MissingDimension(Dimension),
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("metric {0}: worst and best anchors are equal")]
    Anchors(String),
    #[error("metric {0}: weight outside [0, 1]")]
    Weight(String),
    #[error("weights of {0} sum to {1}, expected 1")]
    WeightSum(Dimension, f64),
    #[error("duplicate metric {0}")]
    Duplicate(String),
    #[error("{0}")]
    Grouping(String),
    #[error("rulebase is empty")]
    EmptyRulebase,
    #[error("rule {rule}: bad field {field}")]
    BadField { rule: String, field: String },
    #[error("log has no tick records")]
    EmptyLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Safety,
    Efficiency,
    Comfort,
    Compliance,
    Coordination,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Safety,
        Dimension::Efficiency,
        Dimension::Comfort,
        Dimension::Compliance,
        Dimension::Coordination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Safety => "safety",
            Dimension::Efficiency => "efficiency",
            Dimension::Comfort => "comfort",
            Dimension::Compliance => "compliance",
            Dimension::Coordination => "coordination",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub name: String,
    pub dimension: Dimension,
    pub worst: f64,
    pub best: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub version: u32,
    pub metrics: Vec<MetricSpec>,
    /// Weights of the dimensions in the overall score. Missing entries
    /// count as 1; the weights are normalized over the scored dimensions.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dimension_weights: BTreeMap<Dimension, f64>,
}

impl Scheme {
    pub fn default_scheme() -> Self {
        Self::from_toml(include_str!("../../assets/default_scheme.toml")).expect("bundled scheme is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let s: Scheme = toml::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.version != SCHEME_VERSION {
            return Err(EvalError::Version(self.version));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.metrics {
            if !METRIC_NAMES.contains(&m.name.as_str()) {
                return Err(EvalError::UnknownMetric(m.name.clone()));
            }
            if !seen.insert(&m.name) {
                return Err(EvalError::Duplicate(m.name.clone()));
            }
            if m.worst == m.best || !m.worst.is_finite() || !m.best.is_finite() {
                return Err(EvalError::Anchors(m.name.clone()));
            }
            if !(0.0..=1.0).contains(&m.weight) {
                return Err(EvalError::Weight(m.name.clone()));
            }
        }
        for d in Dimension::ALL {
            let ws: Vec<f64> = self.metrics.iter().filter(|m| m.dimension == d).map(|m| m.weight).collect();
            if ws.is_empty() {
                return Err(EvalError::MissingDimension(d));
            }
            let sum: f64 = ws.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(EvalError::WeightSum(d, sum));
            }
        }
        Ok(())
    }

    /// Copy with `metric`'s weight multiplied by `k` and its dimension
    /// renormalized.
    pub fn reweighted(&self, metric: &str, k: f64) -> Self {
        let mut s = self.clone();
        let Some(dim) = s.metrics.iter().find(|m| m.name == metric).map(|m| m.dimension) else {
            return s;
        };
        for m in s.metrics.iter_mut().filter(|m| m.name == metric) {
            m.weight *= k;
        }
        let sum: f64 = s.metrics.iter().filter(|m| m.dimension == dim).map(|m| m.weight).sum();
        if sum > 0.0 {
            for m in s.metrics.iter_mut().filter(|m| m.dimension == dim) {
                m.weight /= sum;
            }
        }
        s
    }
}

/// Linear map of `raw` from `[worst, best]` onto `[0, 100]`, clamped.
pub fn score_metric(raw: f64, spec: &MetricSpec) -> f64 {
    let t = (raw - spec.worst) / (spec.best - spec.worst);
    (100.0 * t).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub dimension: Dimension,
    /// None when the metric does not apply to the run.
    pub raw: Option<f64>,
    pub score: Option<f64>,
    /// Weight actually used after dropping inapplicable metrics.
    pub effective_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario_id: String,
    pub algorithm: String,
    pub version: String,
    pub vehicle: String,
    pub metrics: BTreeMap<String, MetricResult>,
    /// None when no metric of the dimension applies.
    pub dimensions: BTreeMap<Dimension, Option<f64>>,
    pub overall: f64,
    pub flags: Vec<String>,
    pub notes: Vec<String>,
}

impl EvaluationReport {
    pub fn dimension(&self, d: Dimension) -> Option<f64> {
        self.dimensions.get(&d).copied().flatten()
    }

    pub fn raw(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).and_then(|m| m.raw)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}  algorithm {} ({})  vehicle {}", self.scenario_id, self.algorithm, self.version, self.vehicle);
        let _ = writeln!(s, "overall {:.1}", self.overall);
        for d in Dimension::ALL {
            let v = self.dimension(d).map_or("n/a".into(), |v| format!("{v:.1}"));
            let _ = writeln!(s, "  {:<13} {v}", d.name());
            for (name, m) in self.metrics.iter().filter(|(_, m)| m.dimension == d) {
                let raw = m.raw.map_or("n/a".into(), |v| format!("{v:.3}"));
                let sc = m.score.map_or("n/a".into(), |v| format!("{v:.1}"));
                let _ = writeln!(s, "    {name:<22} raw {raw:>9}  score {sc:>5}  weight {:.2}", m.effective_weight);
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Algorithm label of the vehicle under test: its adapter's policy or
/// address, or `baseline`.
pub fn algorithm_id(log: &RunLog) -> String {
    let spec = &log.header.spec;
    let Some(r) = spec.roster_entry(&spec.vut) else { return "unknown".into() };
    if r.control != ControlSource::Aut {
        return "baseline".into();
    }
    match r.adapter.as_deref().and_then(|a| spec.adapter(a)) {
        Some(a) => match a.kind {
            AdapterKind::Builtin => a.policy.clone().unwrap_or_else(|| a.id.clone()),
            AdapterKind::Tcp => a.id.clone(),
        },
        None => "unknown".into(),
    }
}

/// Score the vehicle under test of `log`.
pub fn evaluate(log: &RunLog, scheme: &Scheme) -> Result<EvaluationReport, EvalError> {
    let vut = log.header.spec.vut.clone();
    evaluate_vehicle(log, scheme, &vut)
}

pub fn evaluate_vehicle(log: &RunLog, scheme: &Scheme, vehicle: &str) -> Result<EvaluationReport, EvalError> {
    scheme.validate()?;
    if log.ticks.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let (raws, flags) = extract(log, vehicle);
    let mut metrics = BTreeMap::new();
    let mut dimensions = BTreeMap::new();
    for d in Dimension::ALL {
        let specs: Vec<&MetricSpec> = scheme.metrics.iter().filter(|m| m.dimension == d).collect();
        let applicable: f64 = specs.iter().filter(|m| raws.get(&m.name).copied().flatten().is_some()).map(|m| m.weight).sum();
        let mut total = 0.0;
        for m in &specs {
            let raw = raws.get(&m.name).copied().flatten();
            let score = raw.map(|r| score_metric(r, m));
            let w = if score.is_some() && applicable > 0.0 { m.weight / applicable } else { 0.0 };
            total += w * score.unwrap_or(0.0);
            metrics.insert(
                m.name.clone(),
                MetricResult {
                    dimension: d,
                    raw,
                    score,
                    effective_weight: w,
                },
            );
        }
        dimensions.insert(d, (applicable > 0.0).then_some(total.clamp(0.0, 100.0)));
    }
    let overall = overall_score(&dimensions, &scheme.dimension_weights);
    Ok(EvaluationReport {
        scenario_id: log.header.spec.id.clone(),
        algorithm: algorithm_id(log),
        version: "unversioned".into(),
        vehicle: vehicle.to_string(),
        metrics,
        dimensions,
        overall,
        flags,
        notes: vec![
            "coordination = induced deceleration of the nearest follower and yield reciprocity at shared conflict areas".into(),
            "overall = weighted mean of the scored dimensions".into(),
        ],
    })
}

/// Weighted mean of the dimensions that have a score.
pub fn overall_score(dimensions: &BTreeMap<Dimension, Option<f64>>, weights: &BTreeMap<Dimension, f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, s) in dimensions {
        if let Some(s) = s {
            let w = weights.get(d).copied().unwrap_or(1.0);
            num += w * s;
            den += w;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(worst: f64, best: f64) -> MetricSpec {
        MetricSpec {
            name: "m".into(),
            dimension: Dimension::Safety,
            worst,
            best,
            weight: 1.0,
        }
    }

    #[test]
    fn linear_scoring() {
        let s = spec(0.0, 6.5);
        assert_eq!(score_metric(6.5, &s), 100.0);
        assert_eq!(score_metric(0.0, &s), 0.0);
        assert!((score_metric(3.25, &s) - 50.0).abs() < 1e-12);
        assert_eq!(score_metric(-1.0, &s), 0.0);
        assert_eq!(score_metric(9.0, &s), 100.0);
        let inv = spec(8.0, 0.0);
        assert!((score_metric(2.0, &inv) - 75.0).abs() < 1e-12);
    }

    #[test]
    fn default_scheme_is_valid() {
        let s = Scheme::default_scheme();
        assert_eq!(s.metrics.len(), 12);
    }

    #[test]
    fn scheme_errors() {
        let mut s = Scheme::default_scheme();
        s.metrics.retain(|m| m.dimension != Dimension::Comfort);
        assert!(matches!(s.validate(), Err(EvalError::MissingDimension(Dimension::Comfort))));
        let mut s = Scheme::default_scheme();
        s.metrics[0].weight = 0.9;
        assert!(matches!(s.validate(), Err(EvalError::WeightSum(Dimension::Safety, _))));
        let mut s = Scheme::default_scheme();
        s.metrics[0].best = s.metrics[0].worst;
        assert!(matches!(s.validate(), Err(EvalError::Anchors(_))));
        let mut s = Scheme::default_scheme();
        s.metrics[0].name = "bogus".into();
        assert!(matches!(s.validate(), Err(EvalError::UnknownMetric(_))));
    }

    #[test]
    fn reweighting_keeps_sums() {
        let s = Scheme::default_scheme().reweighted("min_ttc", 3.0);
        s.validate().unwrap();
        let w = |n: &str| s.metrics.iter().find(|m| m.name == n).unwrap().weight;
        assert!((w("min_ttc") / w("collision") - 5.0).abs() < 1e-12);
    }

    #[test]
    fn overall_skips_unscored_dimensions() {
        let d: BTreeMap<Dimension, Option<f64>> =
            [(Dimension::Safety, Some(40.0)), (Dimension::Comfort, Some(80.0)), (Dimension::Coordination, None)].into();
        assert_eq!(overall_score(&d, &BTreeMap::new()), 60.0);
        let w = [(Dimension::Safety, 3.0)].into();
        assert_eq!(overall_score(&d, &w), 50.0);
    }
}
