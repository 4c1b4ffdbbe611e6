//! The assessment pipeline, pass/fail verdict and element-mix advice.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::dtw::{dtw_align_rows, warp};
use super::metrics::{cross_fuzzy_en, cs_psd, pcc, rmse, standardize, tic};
use super::pca::pca_reduce;
use super::CredibilityError;
use crate::harness::runlog::RunLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CredibilityConfig {
    pub pcc_min: f64,
    pub tic_max: f64,
    pub cs_psd_min: f64,
    /// Margins beyond the thresholds that count as a comfortable pass.
    pub slack_pcc: f64,
    pub slack_tic: f64,
    pub slack_cs_psd: f64,
    pub embed_dim: usize,
    pub tolerance: f64,
    pub fuzzy_power: f64,
}

impl Default for CredibilityConfig {
    fn default() -> Self {
        Self {
            pcc_min: 0.9,
            tic_max: 0.15,
            cs_psd_min: 0.95,
            slack_pcc: 0.05,
            slack_tic: 0.05,
            slack_cs_psd: 0.03,
            embed_dim: 2,
            tolerance: 0.2,
            fuzzy_power: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityReport {
    pub scenario_id: String,
    pub pcc: f64,
    pub rmse: f64,
    pub tic: f64,
    /// Serialized as `null` when infinite.
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub cross_fuzzy_en: f64,
    pub cs_psd: f64,
    pub thresholds: CredibilityConfig,
    pub verdict: Verdict,
    /// Length of the aligned series.
    pub samples: usize,
    /// Share of variance captured by the first component.
    pub explained_ratio: f64,
}

impl CredibilityReport {
    /// Every pass condition holds with the configured slack to spare.
    pub fn passes_with_margin(&self) -> bool {
        let c = &self.thresholds;
        self.verdict == Verdict::Pass
            && self.pcc >= c.pcc_min + c.slack_pcc
            && self.tic <= c.tic_max - c.slack_tic
            && self.cs_psd >= c.cs_psd_min + c.slack_cs_psd
    }
}

/// Time samples by channels; four channels (x, y, speed, accel) per vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dt: f64,
}

/// Vehicles present in every tick of every given log.
fn common_vehicles(logs: &[&RunLog]) -> Vec<String> {
    let mut ids: Option<BTreeSet<String>> = None;
    for log in logs {
        for t in &log.ticks {
            let here: BTreeSet<String> = t
                .entities
                .values()
                .filter(|e| e.kind.is_vehicle())
                .map(|e| e.id.clone())
                .collect();
            ids = Some(match ids {
                None => here,
                Some(prev) => prev.intersection(&here).cloned().collect(),
            });
        }
    }
    ids.unwrap_or_default().into_iter().collect()
}

/// Channels of the given vehicles over all ticks of `log`.
pub fn extract_series(log: &RunLog, ids: &[String]) -> SeriesMatrix {
    let columns = ids
        .iter()
        .flat_map(|id| ["x", "y", "speed", "accel"].map(|c| format!("{id}.{c}")))
        .collect();
    let rows = log
        .ticks
        .iter()
        .map(|t| {
            ids.iter()
                .flat_map(|id| {
                    let e = &t.entities[id];
                    [e.pose.x, e.pose.y, e.speed, e.accel]
                })
                .collect()
        })
        .collect();
    SeriesMatrix {
        columns,
        rows,
        dt: log.header.dt,
    }
}

/// Assess a fusion-test log against a real-world log of the same scenario.
pub fn assess(real: &RunLog, fusion: &RunLog, cfg: &CredibilityConfig) -> Result<CredibilityReport, CredibilityError> {
    let (ra, fa) = (&real.header.spec.id, &fusion.header.spec.id);
    if ra != fa {
        return Err(CredibilityError::ScenarioMismatch(ra.clone(), fa.clone()));
    }
    let ids = common_vehicles(&[real, fusion]);
    if ids.is_empty() {
        return Err(CredibilityError::NoCommonVehicles);
    }
    assess_matrices(ra, &extract_series(real, &ids), &extract_series(fusion, &ids), cfg)
}

/// Pipeline on already extracted matrices with identical columns.
pub fn assess_matrices(
    scenario_id: &str,
    real: &SeriesMatrix,
    fusion: &SeriesMatrix,
    cfg: &CredibilityConfig,
) -> Result<CredibilityReport, CredibilityError> {
    if real.rows.is_empty() || fusion.rows.is_empty() {
        return Err(CredibilityError::Empty);
    }
    let p = real.rows[0].len();
    if fusion.rows[0].len() != p || real.rows.iter().chain(&fusion.rows).any(|r| r.len() != p) {
        return Err(CredibilityError::Ragged);
    }

    // Standardize with pooled statistics so both logs share one scale, and
    // drop channels that never vary.
    let pooled: Vec<&Vec<f64>> = real.rows.iter().chain(&fusion.rows).collect();
    let n = pooled.len() as f64;
    let mut keep = Vec::new();
    for c in 0..p {
        let m = pooled.iter().map(|r| r[c]).sum::<f64>() / n;
        let sd = (pooled.iter().map(|r| (r[c] - m) * (r[c] - m)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 {
            keep.push((c, m, sd));
        }
    }
    if keep.is_empty() {
        return Err(CredibilityError::Degenerate);
    }
    let scale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| keep.iter().map(|&(c, m, sd)| (r[c] - m) / sd).collect())
            .collect()
    };
    let (sr, sf) = (scale(&real.rows), scale(&fusion.rows));

    let aligned = dtw_align_rows(&sr, &sf)?;
    let (wr, wf) = warp(&sr, &sf, &aligned.path);

    // One basis for both sources: fit on the stacked warped rows.
    let stacked: Vec<Vec<f64>> = wr.iter().chain(&wf).cloned().collect();
    let basis = pca_reduce(&stacked, 1)?;
    let pr: Vec<f64> = basis.project(&wr).into_iter().map(|r| r[0]).collect();
    let pf: Vec<f64> = basis.project(&wf).into_iter().map(|r| r[0]).collect();

    let v_pcc = pcc(&pr, &pf)?;
    let v_rmse = rmse(&pr, &pf)?;
    let v_tic = tic(&pr, &pf)?;
    let v_cfe = cross_fuzzy_en(
        &standardize(&pr)?,
        &standardize(&pf)?,
        cfg.embed_dim,
        cfg.tolerance,
        cfg.fuzzy_power,
    )?;
    let v_cs = cs_psd(&pr, &pf)?;
    let pass = v_pcc >= cfg.pcc_min && v_tic <= cfg.tic_max && v_cs >= cfg.cs_psd_min;
    Ok(CredibilityReport {
        scenario_id: scenario_id.to_string(),
        pcc: v_pcc,
        rmse: v_rmse,
        tic: v_tic,
        cross_fuzzy_en: v_cfe,
        cs_psd: v_cs,
        thresholds: cfg.clone(),
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        samples: pr.len(),
        explained_ratio: basis.explained_ratio()[0],
    })
}

/// Copy of `log` with a smooth oscillation of relative amplitude `eps`
/// added to every vehicle channel: channel `c` of a vehicle gets
/// `eps · σ_c · sin(2πt/3 + 0.7c)`, `σ_c` being that channel's standard
/// deviation over the log.
pub fn perturb_log(log: &RunLog, eps: f64) -> RunLog {
    let mut out = log.clone();
    let ids: BTreeSet<String> = log
        .ticks
        .iter()
        .flat_map(|t| t.entities.values().filter(|e| e.kind.is_vehicle()).map(|e| e.id.clone()))
        .collect();
    for id in ids {
        let series: Vec<[f64; 4]> = log
            .ticks
            .iter()
            .filter_map(|t| t.entities.get(&id))
            .map(|e| [e.pose.x, e.pose.y, e.speed, e.accel])
            .collect();
        let n = series.len() as f64;
        let sd: Vec<f64> = (0..4)
            .map(|c| {
                let m = series.iter().map(|s| s[c]).sum::<f64>() / n;
                (series.iter().map(|s| (s[c] - m) * (s[c] - m)).sum::<f64>() / n).sqrt()
            })
            .collect();
        for t in out.ticks.iter_mut() {
            let time = t.time;
            if let Some(e) = t.entities.get_mut(&id) {
                let bump = |c: usize| eps * sd[c] * (2.0 * std::f64::consts::PI * time / 3.0 + 0.7 * c as f64).sin();
                e.pose.x += bump(0);
                e.pose.y += bump(1);
                e.speed += bump(2);
                e.accel += bump(3);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub physical: u32,
    pub virtual_: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRecommendation {
    pub mix: Mix,
    pub changed: bool,
    /// The rule wanted to shift an element but none was left to shift.
    pub saturated: bool,
}

/// Low credibility moves one background element from virtual to physical;
/// a comfortable pass moves one from physical to virtual.
pub fn recommend_mix(report: &CredibilityReport, current: Mix) -> MixRecommendation {
    let unchanged = |saturated| MixRecommendation {
        mix: current,
        changed: false,
        saturated,
    };
    if report.verdict == Verdict::Fail {
        if current.virtual_ == 0 {
            return unchanged(true);
        }
        return MixRecommendation {
            mix: Mix {
                physical: current.physical + 1,
                virtual_: current.virtual_ - 1,
            },
            changed: true,
            saturated: false,
        };
    }
    if report.passes_with_margin() {
        if current.physical == 0 {
            return unchanged(true);
        }
        return MixRecommendation {
            mix: Mix {
                physical: current.physical - 1,
                virtual_: current.virtual_ + 1,
            },
            changed: true,
            saturated: false,
        };
    }
    unchanged(false)
}

/// Plain-text table with one row per scenario.
pub fn render_table(reports: &[CredibilityReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>8} {:>10} {:>8} {:>14} {:>8} {:>8}",
        "Scenario", "PCC", "RMSE", "TIC", "Cross-FuzzyEn", "CS-PSD", "Verdict"
    );
    for r in reports {
        let cfe = if r.cross_fuzzy_en.is_finite() {
            format!("{:.4}", r.cross_fuzzy_en)
        } else {
            "inf".to_string()
        };
        let _ = writeln!(
            s,
            "{:<28} {:>8.4} {:>10.4} {:>8.4} {:>14} {:>8.4} {:>8}",
            r.scenario_id,
            r.pcc,
            r.rmse,
            r.tic,
            cfe,
            r.cs_psd,
            match r.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "fail",
            }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(pcc: f64, tic: f64, cs: f64) -> CredibilityReport {
        let cfg = CredibilityConfig::default();
        let pass = pcc >= cfg.pcc_min && tic <= cfg.tic_max && cs >= cfg.cs_psd_min;
        CredibilityReport {
            scenario_id: "s".into(),
            pcc,
            rmse: 0.1,
            tic,
            cross_fuzzy_en: 0.1,
            cs_psd: cs,
            thresholds: cfg,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            samples: 10,
            explained_ratio: 0.9,
        }
    }

    fn mix(p: u32, v: u32) -> Mix {
        Mix { physical: p, virtual_: v }
    }

    #[test]
    fn mix_rules() {
        let fail = report(0.5, 0.4, 0.5);
        assert_eq!(recommend_mix(&fail, mix(1, 5)).mix, mix(2, 4));
        let r = recommend_mix(&fail, mix(6, 0));
        assert_eq!(r.mix, mix(6, 0));
        assert!(r.saturated && !r.changed);
        let great = report(0.99, 0.02, 0.999);
        assert_eq!(recommend_mix(&great, mix(3, 3)).mix, mix(2, 4));
        let marginal = report(0.91, 0.14, 0.96);
        let r = recommend_mix(&marginal, mix(3, 3));
        assert_eq!(r.mix, mix(3, 3));
        assert!(!r.saturated);
    }

    #[test]
    fn infinite_entropy_round_trips() {
        let mut r = report(0.99, 0.02, 0.999);
        r.cross_fuzzy_en = f64::INFINITY;
        let json = serde_json::to_string(&r).unwrap();
        let back: CredibilityReport = serde_json::from_str(&json).unwrap();
        assert!(back.cross_fuzzy_en.is_infinite());
    }

    #[test]
    fn matrices_identity_and_reversal() {
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|k| {
                let t = k as f64 * 0.1;
                vec![10.0 * t, 0.5 * (0.4 * t).sin(), 10.0 + (0.3 * t).cos(), -0.3 * (0.3 * t).sin()]
            })
            .collect();
        let m = SeriesMatrix {
            columns: vec!["x".into(), "y".into(), "v".into(), "a".into()],
            rows: rows.clone(),
            dt: 0.1,
        };
        let r = assess_matrices("s", &m, &m, &CredibilityConfig::default()).unwrap();
        assert!((r.pcc - 1.0).abs() < 1e-9);
        assert!(r.rmse.abs() < 1e-12 && r.tic.abs() < 1e-12);
        assert!((r.cs_psd - 1.0).abs() < 1e-9);
        assert_eq!(r.verdict, Verdict::Pass);

        let mut rev = m.clone();
        rev.rows.reverse();
        let r = assess_matrices("s", &m, &rev, &CredibilityConfig::default()).unwrap();
        assert!(r.pcc < 0.0, "pcc {}", r.pcc);
        assert_eq!(r.verdict, Verdict::Fail);
    }
}
