//! Rule-based diagnosis of evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dimension, EvalError, EvaluationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Op::Lt => a < b,
            Op::Le => a <= b,
            Op::Gt => a > b,
            Op::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

/// `field` is `score.<dimension>`, `metric.<name>` (metric score) or
/// `raw.<name>`. A condition on an unscored or inapplicable value is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub field: String,
    pub op: Op,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub id: String,
    pub dimension: Dimension,
    pub metric: String,
    pub severity: Severity,
    pub suggestion: String,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rulebase {
    pub version: u32,
    pub rules: Vec<Rule>,
}

impl Rulebase {
    pub fn default_rules() -> Self {
        Self::from_toml(include_str!("../../assets/default_rules.toml")).expect("bundled rulebase is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let r: Rulebase = toml::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
        if r.version != super::SCHEME_VERSION {
            return Err(EvalError::Version(r.version));
        }
        if r.rules.is_empty() {
            return Err(EvalError::EmptyRulebase);
        }
        for rule in &r.rules {
            for c in &rule.conditions {
                if parse_field(&c.field).is_none() {
                    return Err(EvalError::BadField {
                        rule: rule.id.clone(),
                        field: c.field.clone(),
                    });
                }
            }
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

enum Field<'a> {
    Score(Dimension),
    Metric(&'a str),
    Raw(&'a str),
}

fn parse_field(f: &str) -> Option<Field<'_>> {
    let (kind, name) = f.split_once('.')?;
    match kind {
        "score" => Dimension::from_name(name).map(Field::Score),
        "metric" if super::METRIC_NAMES.contains(&name) => Some(Field::Metric(name)),
        "raw" if super::METRIC_NAMES.contains(&name) => Some(Field::Raw(name)),
        _ => None,
    }
}

fn lookup(report: &EvaluationReport, field: &str) -> Option<f64> {
    match parse_field(field)? {
        Field::Score(d) => report.dimension(d),
        Field::Metric(m) => report.metrics.get(m).and_then(|m| m.score),
        Field::Raw(m) => report.raw(m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: String,
    pub dimension: Dimension,
    pub metric: String,
    pub severity: Severity,
    pub suggestion: String,
    /// Values of the rule's fields when it fired.
    pub evidence: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub scenario_id: String,
    pub algorithm: String,
    pub findings: Vec<Finding>,
}

impl DiagnosticReport {
    pub fn render(&self) -> String {
        let mut s = format!("diagnosis for {} on {}\n", self.algorithm, self.scenario_id);
        if self.findings.is_empty() {
            s.push_str("  no findings\n");
        }
        for f in &self.findings {
            s.push_str(&format!("  [{:?}] {} ({} / {}): {}\n", f.severity, f.rule, f.dimension, f.metric, f.suggestion));
        }
        s
    }
}

/// Rules whose conditions all hold, most severe first.
pub fn diagnose(report: &EvaluationReport, rulebase: &Rulebase) -> Result<DiagnosticReport, EvalError> {
    if rulebase.rules.is_empty() {
        return Err(EvalError::EmptyRulebase);
    }
    let mut findings = Vec::new();
    for rule in &rulebase.rules {
        let values: Option<Vec<(String, f64)>> = rule
            .conditions
            .iter()
            .map(|c| {
                let v = lookup(report, &c.field)?;
                c.op.holds(v, c.value).then(|| (c.field.clone(), v))
            })
            .collect();
        if let Some(evidence) = values.filter(|_| !rule.conditions.is_empty()) {
            findings.push(Finding {
                rule: rule.id.clone(),
                dimension: rule.dimension,
                metric: rule.metric.clone(),
                severity: rule.severity,
                suggestion: rule.suggestion.clone(),
                evidence,
            });
        }
    }
    findings.sort_by(|a, b| b.severity.cmp(&a.severity).then(a.rule.cmp(&b.rule)));
    Ok(DiagnosticReport {
        scenario_id: report.scenario_id.clone(),
        algorithm: report.algorithm.clone(),
        findings,
    })
}
