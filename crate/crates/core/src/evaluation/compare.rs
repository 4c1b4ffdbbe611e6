//! Horizontal (algorithms on one scenario) and vertical (one algorithm
//! across scenarios) ranking tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Dimension, EvalError, EvaluationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    /// Algorithm for horizontal tables, scenario for vertical ones.
    pub label: String,
    pub scores: BTreeMap<Dimension, Option<f64>>,
    pub overall: f64,
    /// Competition ranks (1, 1, 3, ...); unscored dimensions rank last.
    pub ranks: BTreeMap<Dimension, usize>,
    pub overall_rank: usize,
    /// Gap to the best row per dimension (non-positive).
    pub deltas: BTreeMap<Dimension, Option<f64>>,
    pub overall_delta: f64,
    pub best: Vec<Dimension>,
    pub worst: Vec<Dimension>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub axis: Axis,
    /// The shared scenario (horizontal) or algorithm (vertical).
    pub group: String,
    pub rows: Vec<RankRow>,
}

fn competition_ranks(values: &[Option<f64>]) -> Vec<usize> {
    values
        .iter()
        .map(|v| {
            let better = values
                .iter()
                .filter(|o| match (o, v) {
                    (Some(o), Some(v)) => o > v,
                    (Some(_), None) => true,
                    _ => false,
                })
                .count();
            better + 1
        })
        .collect()
}

pub fn compare(reports: &[EvaluationReport], axis: Axis) -> Result<RankingTable, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Grouping("no reports to compare".into()))?;
    let key = |r: &EvaluationReport| match axis {
        Axis::Horizontal => r.scenario_id.clone(),
        Axis::Vertical => format!("{}@{}", r.algorithm, r.version),
    };
    let group = key(first);
    if let Some(bad) = reports.iter().find(|r| key(r) != group) {
        let what = match axis {
            Axis::Horizontal => "scenario",
            Axis::Vertical => "algorithm",
        };
        return Err(EvalError::Grouping(format!("{axis:?} comparison needs one {what}: {group} vs {}", key(bad))));
    }
    let mut rows: Vec<RankRow> = reports
        .iter()
        .map(|r| RankRow {
            label: match axis {
                Axis::Horizontal => format!("{}@{}", r.algorithm, r.version),
                Axis::Vertical => r.scenario_id.clone(),
            },
            scores: r.dimensions.clone(),
            overall: r.overall,
            ranks: BTreeMap::new(),
            overall_rank: 0,
            deltas: BTreeMap::new(),
            overall_delta: 0.0,
            best: Vec::new(),
            worst: Vec::new(),
        })
        .collect();
    for d in Dimension::ALL {
        let vals: Vec<Option<f64>> = rows.iter().map(|r| r.scores.get(&d).copied().flatten()).collect();
        let ranks = competition_ranks(&vals);
        let top = vals.iter().flatten().copied().reduce(f64::max);
        let bottom = vals.iter().flatten().copied().reduce(f64::min);
        for (i, row) in rows.iter_mut().enumerate() {
            row.ranks.insert(d, ranks[i]);
            row.deltas.insert(d, vals[i].zip(top).map(|(v, t)| v - t));
            if vals[i].is_some() && vals[i] == top {
                row.best.push(d);
            }
            if vals[i].is_some() && vals[i] == bottom {
                row.worst.push(d);
            }
        }
    }
    let overall: Vec<Option<f64>> = rows.iter().map(|r| Some(r.overall)).collect();
    let ranks = competition_ranks(&overall);
    let top = rows.iter().map(|r| r.overall).fold(f64::NEG_INFINITY, f64::max);
    for (row, rank) in rows.iter_mut().zip(ranks) {
        row.overall_rank = rank;
        row.overall_delta = row.overall - top;
    }
    Ok(RankingTable { axis, group, rows })
}

impl RankingTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:?} comparison: {}", self.axis, self.group);
        let _ = write!(s, "{:<24}", "");
        for d in Dimension::ALL {
            let _ = write!(s, "{:>15}", d.name());
        }
        let _ = writeln!(s, "{:>15}", "overall");
        for r in &self.rows {
            let _ = write!(s, "{:<24}", r.label);
            for d in Dimension::ALL {
                let mark = if r.best.contains(&d) {
                    "+"
                } else if r.worst.contains(&d) {
                    "-"
                } else {
                    " "
                };
                let cell = match r.scores.get(&d).copied().flatten() {
                    Some(v) => format!("{v:.1} #{}{mark}", r.ranks[&d]),
                    None => "n/a".into(),
                };
                let _ = write!(s, "{cell:>15}");
            }
            let _ = writeln!(s, "{:>15}", format!("{:.1} #{}", r.overall, r.overall_rank));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scenario: &str, algorithm: &str, scores: [f64; 5]) -> EvaluationReport {
        let dimensions: BTreeMap<Dimension, Option<f64>> = Dimension::ALL.into_iter().zip(scores.map(Some)).collect();
        EvaluationReport {
            scenario_id: scenario.into(),
            algorithm: algorithm.into(),
            version: "1".into(),
            vehicle: "vut".into(),
            metrics: BTreeMap::new(),
            overall: super::super::overall_score(&dimensions, &BTreeMap::new()),
            dimensions,
            flags: vec![],
            notes: vec![],
        }
    }

    #[test]
    fn identical_reports_tie() {
        let r = report("s", "a", [50.0, 60.0, 70.0, 80.0, 90.0]);
        let t = compare(&[r.clone(), r], Axis::Horizontal).unwrap();
        for row in &t.rows {
            assert!(row.ranks.values().all(|r| *r == 1));
            assert_eq!(row.overall_rank, 1);
            assert!(row.deltas.values().all(|d| *d == Some(0.0)));
        }
    }

    #[test]
    fn grouping_errors() {
        let a = report("s1", "a", [0.0; 5]);
        let b = report("s2", "a", [0.0; 5]);
        assert!(matches!(compare(&[a.clone(), b.clone()], Axis::Horizontal), Err(EvalError::Grouping(_))));
        assert!(compare(&[a.clone(), b], Axis::Vertical).is_ok());
        let c = report("s1", "b", [0.0; 5]);
        assert!(matches!(compare(&[a, c], Axis::Vertical), Err(EvalError::Grouping(_))));
    }

    #[test]
    fn vertical_table_flags_extremes() {
        let rs = [
            report("s1", "a", [10.0, 50.0, 50.0, 50.0, 50.0]),
            report("s2", "a", [30.0, 50.0, 40.0, 50.0, 50.0]),
            report("s3", "a", [20.0, 50.0, 60.0, 50.0, 50.0]),
        ];
        let t = compare(&rs, Axis::Vertical).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[1].ranks[&Dimension::Safety], 1);
        assert_eq!(t.rows[0].ranks[&Dimension::Safety], 3);
        assert!(t.rows[1].best.contains(&Dimension::Safety) && t.rows[0].worst.contains(&Dimension::Safety));
        assert!(t.rows[2].best.contains(&Dimension::Comfort) && t.rows[1].worst.contains(&Dimension::Comfort));
        assert_eq!(t.rows[0].deltas[&Dimension::Safety], Some(-20.0));
        assert_eq!(competition_ranks(&[Some(2.0), Some(5.0), Some(5.0), None]), vec![3, 1, 1, 4]);
    }
}
