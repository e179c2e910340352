//! Run summaries, per-group plot data and sensitivity tables.
//!
//! Reports only reshape serialized artifacts (threshold tables, estimates,
//! subgroup statistics); the only statistics computed here are extrema and
//! the Wilson band drawn around each group's coverage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibrate::{wilson_interval, ThresholdMode, ThresholdTable};
use crate::error::{Error, Result};
use crate::ope::{EstimateRow, Estimator, SubgroupStat, ValueEstimate};

/// Policies every run reports on.
pub const REPORTED_POLICIES: [&str; 4] = ["fg_farl", "haco", "bc", "fair_bc"];

/// Subgroup rows of the observed episodic returns use this policy name.
pub const LOGGED_POLICY: &str = "logged";

pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const HACO_THRESHOLDS_FILE: &str = "thresholds_haco.json";
pub const ESTIMATES_FILE: &str = "estimates.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Coverage band level for the Wilson interval in the coverage plot data.
const WILSON_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEstimates {
    pub policy: String,
    pub v0: f64,
    pub dr: ValueEstimate,
    pub dr_selfnorm: ValueEstimate,
}

/// Everything the pipeline serializes for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_label: String,
    pub thresholds: ThresholdTable,
    pub haco_thresholds: ThresholdTable,
    pub policies: Vec<PolicyEstimates>,
    /// `policy → per-category statistics`; includes the logged episodic returns.
    pub subgroups: BTreeMap<String, Vec<SubgroupStat>>,
}

/// Serialized form of `estimates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EstimatesFile {
    run_label: String,
    policies: Vec<PolicyEstimates>,
    subgroups: BTreeMap<String, Vec<SubgroupStat>>,
    rows: Vec<EstimateRow>,
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

impl RunArtifacts {
    /// Flat estimate rows: overall DR / self-normalized DR per policy, then subgroup rows.
    pub fn estimate_rows(&self) -> Vec<EstimateRow> {
        let mut rows = Vec::new();
        for p in &self.policies {
            rows.push(EstimateRow::from_estimate(&p.policy, &p.dr));
            rows.push(EstimateRow::from_estimate(&p.policy, &p.dr_selfnorm));
        }
        for (policy, stats) in &self.subgroups {
            let est = if policy == LOGGED_POLICY {
                Estimator::EpisodicReturn
            } else {
                Estimator::Dr
            };
            rows.extend(stats.iter().map(|s| EstimateRow::from_subgroup(policy, est, s)));
        }
        rows
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(THRESHOLDS_FILE), &self.thresholds)?;
        write_json(&dir.join(HACO_THRESHOLDS_FILE), &self.haco_thresholds)?;
        write_json(
            &dir.join(ESTIMATES_FILE),
            &EstimatesFile {
                run_label: self.run_label.clone(),
                policies: self.policies.clone(),
                subgroups: self.subgroups.clone(),
                rows: self.estimate_rows(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let est: EstimatesFile = read_json(&dir.join(ESTIMATES_FILE))?;
        Ok(RunArtifacts {
            run_label: est.run_label,
            thresholds: read_json(&dir.join(THRESHOLDS_FILE))?,
            haco_thresholds: read_json(&dir.join(HACO_THRESHOLDS_FILE))?,
            policies: est.policies,
            subgroups: est.subgroups,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSummary {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub selfnorm_point: f64,
    pub selfnorm_ci_lo: f64,
    pub selfnorm_ci_hi: f64,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_label: String,
    pub mode: ThresholdMode,
    pub attribute: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub global_tau: f64,
    pub h_bar: f64,
    pub v0: BTreeMap<String, f64>,
    pub dr: BTreeMap<String, DrSummary>,
    /// Extrema over non-fallback groups; `None` when every group fell back.
    pub coverage_minmax: Option<(f64, f64)>,
    pub harm_minmax: Option<(f64, f64)>,
    /// Groups using the global threshold, reported apart from the extrema.
    pub fallback: Vec<String>,
    /// Stage wall-clock seconds; written to `timings.json`, not to the summary file.
    #[serde(skip)]
    pub stage_timings: BTreeMap<String, f64>,
}

fn minmax(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Table-level summary of a finished run.
pub fn summarize(artifacts: &RunArtifacts, stage_timings: BTreeMap<String, f64>) -> Result<RunSummary> {
    let mut v0 = BTreeMap::new();
    let mut dr = BTreeMap::new();
    for name in REPORTED_POLICIES {
        let p = artifacts
            .policies
            .iter()
            .find(|p| p.policy == name)
            .ok_or_else(|| Error::MissingArtifact(format!("estimates for policy {name}")))?;
        v0.insert(name.to_string(), p.v0);
        dr.insert(
            name.to_string(),
            DrSummary {
                point: p.dr.point,
                ci_lo: p.dr.ci_lo,
                ci_hi: p.dr.ci_hi,
                selfnorm_point: p.dr_selfnorm.point,
                selfnorm_ci_lo: p.dr_selfnorm.ci_lo,
                selfnorm_ci_hi: p.dr_selfnorm.ci_hi,
                n_episodes: p.dr.n_episodes,
            },
        );
    }
    if let Some((stage, t)) = stage_timings.iter().find(|(_, t)| !(**t >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative timing for stage {stage}: {t}")));
    }
    let t = &artifacts.thresholds;
    Ok(RunSummary {
        run_label: artifacts.run_label.clone(),
        mode: t.mode,
        attribute: t.attribute.clone(),
        alpha: t.alpha,
        epsilon: t.epsilon,
        global_tau: t.global_tau,
        h_bar: t.h_bar,
        v0,
        dr,
        coverage_minmax: minmax(t.calibrated_groups().map(|(_, g)| g.coverage)),
        harm_minmax: minmax(t.calibrated_groups().map(|(_, g)| g.harm)),
        fallback: t.groups.iter().filter(|(_, g)| g.fallback).map(|(c, _)| c.clone()).collect(),
        stage_timings,
    })
}

/// Rounds to the 6 decimals used in every CSV, so the tables and the files agree exactly.
pub fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub category: String,
    pub coverage: f64,
    pub target: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub n: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmRow {
    pub category: String,
    pub harm: f64,
    pub cap: f64,
    pub n: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub category: String,
    pub n: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub coverage_by_group: Vec<CoverageRow>,
    pub harm_by_group: Vec<HarmRow>,
    pub value_by_group: Vec<ValueRow>,
}

pub fn plot_data(artifacts: &RunArtifacts) -> Result<PlotData> {
    let t = &artifacts.thresholds;
    let coverage_by_group = t
        .groups
        .iter()
        .map(|(cat, g)| {
            let (lo, hi) = wilson_interval(g.coverage, g.n, WILSON_LEVEL)?;
            Ok(CoverageRow {
                category: cat.clone(),
                coverage: round6(g.coverage),
                target: round6(1.0 - t.alpha),
                wilson_lo: round6(lo),
                wilson_hi: round6(hi),
                n: g.n,
                fallback: g.fallback,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let harm_by_group = t
        .groups
        .iter()
        .map(|(cat, g)| HarmRow {
            category: cat.clone(),
            harm: round6(g.harm),
            cap: round6(t.h_bar + t.epsilon),
            n: g.n,
            fallback: g.fallback,
        })
        .collect();
    let value_by_group = artifacts
        .subgroups
        .iter()
        .flat_map(|(policy, stats)| {
            stats.iter().map(move |s| ValueRow {
                category: s.category.clone(),
                n: s.n,
                mean: round6(s.mean),
                ci_lo: round6(s.ci_lo),
                ci_hi: round6(s.ci_hi),
                p_value: round6(s.p_value),
                policy: policy.clone(),
            })
        })
        .collect();
    Ok(PlotData {
        coverage_by_group,
        harm_by_group,
        value_by_group,
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const COVERAGE_CSV: &str = "coverage_by_group.csv";
pub const HARM_CSV: &str = "harm_by_group.csv";
pub const VALUE_CSV: &str = "value_by_group.csv";
pub const PLOT_JSON: &str = "plot_data.json";

/// Writes the three per-group CSV files and their JSON mirror.
pub fn emit_plot_data(artifacts: &RunArtifacts, out_dir: &Path) -> Result<PlotData> {
    let data = plot_data(artifacts)?;
    write_csv(
        &out_dir.join(COVERAGE_CSV),
        &["category", "coverage", "target", "wilson_lo", "wilson_hi", "n", "fallback"],
        data.coverage_by_group.iter().map(|r| {
            vec![
                r.category.clone(),
                fmt6(r.coverage),
                fmt6(r.target),
                fmt6(r.wilson_lo),
                fmt6(r.wilson_hi),
                r.n.to_string(),
                r.fallback.to_string(),
            ]
        }),
    )?;
    write_csv(
        &out_dir.join(HARM_CSV),
        &["category", "harm", "cap", "n", "fallback"],
        data.harm_by_group.iter().map(|r| {
            vec![
                r.category.clone(),
                fmt6(r.harm),
                fmt6(r.cap),
                r.n.to_string(),
                r.fallback.to_string(),
            ]
        }),
    )?;
    write_csv(
        &out_dir.join(VALUE_CSV),
        &["category", "n", "mean", "ci_lo", "ci_hi", "p_value", "policy"],
        data.value_by_group.iter().map(|r| {
            vec![
                r.category.clone(),
                r.n.to_string(),
                fmt6(r.mean),
                fmt6(r.ci_lo),
                fmt6(r.ci_hi),
                fmt6(r.p_value),
                r.policy.clone(),
            ]
        }),
    )?;
    write_json(&out_dir.join(PLOT_JSON), &data)?;
    Ok(data)
}

/// Parses the three CSV files back into rows.
pub fn read_plot_data(dir: &Path) -> Result<PlotData> {
    fn rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
    Ok(PlotData {
        coverage_by_group: rows(&dir.join(COVERAGE_CSV))?,
        harm_by_group: rows(&dir.join(HARM_CSV))?,
        value_by_group: rows(&dir.join(VALUE_CSV))?,
    })
}

pub fn write_summary(summary: &RunSummary, dir: &Path, with_timings: bool) -> Result<()> {
    write_json(&dir.join(SUMMARY_FILE), summary)?;
    if with_timings {
        write_json(&dir.join(TIMINGS_FILE), &summary.stage_timings)?;
    }
    Ok(())
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let mut s: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let timings = dir.join(TIMINGS_FILE);
    if timings.exists() {
        s.stage_timings = read_json(&timings)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub alpha: f64,
    pub epsilon: f64,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub harm_lo: Option<f64>,
    pub harm_hi: Option<f64>,
    pub dr_point: f64,
    pub dr_ci_lo: f64,
    pub dr_ci_hi: f64,
    pub run_label: String,
}

/// One row per run (FG-FARL DR value), sorted by α. Runs must agree on
/// mode, attribute and ε.
pub fn sensitivity_table(runs: &[RunSummary]) -> Result<Vec<SensitivityRow>> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    for r in runs {
        if r.mode != first.mode || r.attribute != first.attribute || r.epsilon != first.epsilon {
            return Err(Error::IncompatibleRuns(format!(
                "{} ({} / {} / eps {}) vs {} ({} / {} / eps {})",
                first.run_label, first.mode, first.attribute, first.epsilon, r.run_label, r.mode, r.attribute, r.epsilon
            )));
        }
    }
    let mut rows: Vec<SensitivityRow> = runs
        .iter()
        .map(|r| {
            let dr = r
                .dr
                .get("fg_farl")
                .ok_or_else(|| Error::MissingArtifact(format!("fg_farl estimate in run {}", r.run_label)))?;
            Ok(SensitivityRow {
                alpha: r.alpha,
                epsilon: r.epsilon,
                coverage_lo: r.coverage_minmax.map(|m| m.0),
                coverage_hi: r.coverage_minmax.map(|m| m.1),
                harm_lo: r.harm_minmax.map(|m| m.0),
                harm_hi: r.harm_minmax.map(|m| m.1),
                dr_point: dr.point,
                dr_ci_lo: dr.ci_lo,
                dr_ci_hi: dr.ci_hi,
                run_label: r.run_label.clone(),
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    Ok(rows)
}

pub fn write_sensitivity_csv(rows: &[SensitivityRow], path: &Path) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
    write_csv(
        path,
        &[
            "alpha", "epsilon", "coverage_lo", "coverage_hi", "harm_lo", "harm_hi", "dr_point", "dr_ci_lo", "dr_ci_hi", "run_label",
        ],
        rows.iter().map(|r| {
            vec![
                fmt6(r.alpha),
                fmt6(r.epsilon),
                opt(r.coverage_lo),
                opt(r.coverage_hi),
                opt(r.harm_lo),
                opt(r.harm_hi),
                fmt6(r.dr_point),
                fmt6(r.dr_ci_lo),
                fmt6(r.dr_ci_hi),
                r.run_label.clone(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::GroupThreshold;

    fn estimate(point: f64) -> ValueEstimate {
        ValueEstimate {
            estimator: Estimator::Dr,
            point,
            ci_lo: point - 0.1,
            ci_hi: point + 0.1,
            n_episodes: 10,
            replicates: 1000,
            level: 0.95,
            seed: 1,
        }
    }

    fn table(groups: &[(&str, f64, f64, bool)]) -> ThresholdTable {
        ThresholdTable {
            attribute: "race".into(),
            mode: ThresholdMode::Harm,
            alpha: 0.1,
            epsilon: 0.02,
            min_group_n: 200,
            global_tau: 0.3,
            h_bar: 0.1,
            groups: groups
                .iter()
                .map(|&(c, coverage, harm, fallback)| {
                    (
                        c.to_string(),
                        GroupThreshold {
                            tau: 0.3,
                            n: 250,
                            fallback,
                            coverage,
                            harm,
                        },
                    )
                })
                .collect(),
            warnings: vec![],
        }
    }

    fn artifacts(groups: &[(&str, f64, f64, bool)]) -> RunArtifacts {
        let stat = |c: &str, reference: bool| SubgroupStat {
            category: c.into(),
            n: 5,
            mean: -0.1234567,
            ci_lo: -0.2,
            ci_hi: 0.0,
            p_value: if reference { 1.0 } else { 0.3 },
            reference,
        };
        RunArtifacts {
            run_label: "r".into(),
            thresholds: table(groups),
            haco_thresholds: table(groups),
            policies: REPORTED_POLICIES
                .iter()
                .enumerate()
                .map(|(i, p)| PolicyEstimates {
                    policy: p.to_string(),
                    v0: -(i as f64),
                    dr: estimate(-(i as f64)),
                    dr_selfnorm: estimate(-(i as f64)),
                })
                .collect(),
            subgroups: [("fg_farl".to_string(), vec![stat("a", true), stat("b", false)])].into(),
        }
    }

    #[test]
    fn single_group_min_equals_max() {
        let s = summarize(&artifacts(&[("a", 0.9, 0.05, false)]), BTreeMap::new()).unwrap();
        assert_eq!(s.coverage_minmax, Some((0.9, 0.9)));
        assert_eq!(s.harm_minmax, Some((0.05, 0.05)));
    }

    #[test]
    fn extrema_skip_fallback_groups() {
        let a = artifacts(&[("a", 0.9, 0.05, false), ("b", 0.95, 0.01, false), ("c", 0.2, 0.9, true)]);
        let s = summarize(&a, BTreeMap::new()).unwrap();
        assert_eq!(s.coverage_minmax, Some((0.9, 0.95)));
        assert_eq!(s.harm_minmax, Some((0.01, 0.05)));
        assert_eq!(s.fallback, vec!["c".to_string()]);
    }

    #[test]
    fn missing_policy_is_named() {
        let mut a = artifacts(&[("a", 0.9, 0.05, false)]);
        a.policies.retain(|p| p.policy != "haco");
        match summarize(&a, BTreeMap::new()) {
            Err(Error::MissingArtifact(m)) => assert!(m.contains("haco")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plot_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifacts(&[("a", 0.9, 0.05, false), ("b", 0.8, 0.1, true)]);
        let written = emit_plot_data(&a, dir.path()).unwrap();
        assert_eq!(written.coverage_by_group.len(), 2);
        assert!(written.coverage_by_group.iter().all(|r| r.target == 0.9));
        assert_eq!(read_plot_data(dir.path()).unwrap(), written);
        let mirror: PlotData = serde_json::from_str(&std::fs::read_to_string(dir.path().join(PLOT_JSON)).unwrap()).unwrap();
        assert_eq!(mirror, written);
        assert_eq!(written.value_by_group[0].mean, -0.123457);
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifacts(&[("a", 0.9, 0.05, false)]);
        a.save(dir.path()).unwrap();
        assert_eq!(RunArtifacts::load(dir.path()).unwrap(), a);
        assert!(matches!(
            RunArtifacts::load(&dir.path().join("nope")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn summary_file_omits_timings() {
        let dir = tempfile::tempdir().unwrap();
        let s = summarize(&artifacts(&[("a", 0.9, 0.05, false)]), [("risk".to_string(), 0.5)].into()).unwrap();
        write_summary(&s, dir.path(), true).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(!text.contains("stage_timings"));
        assert_eq!(load_summary(dir.path()).unwrap().stage_timings["risk"], 0.5);
    }

    #[test]
    fn sensitivity_sorted_and_checked() {
        let base = summarize(&artifacts(&[("a", 0.9, 0.05, false)]), BTreeMap::new()).unwrap();
        let runs: Vec<RunSummary> = [0.2, 0.05, 0.1]
            .iter()
            .map(|&alpha| RunSummary {
                alpha,
                run_label: format!("a{alpha}"),
                ..base.clone()
            })
            .collect();
        let rows = sensitivity_table(&runs).unwrap();
        assert_eq!(rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.05, 0.1, 0.2]);
        assert_eq!(rows[0].coverage_lo, base.coverage_minmax.map(|m| m.0));
        assert_eq!(rows[0].dr_point, base.dr["fg_farl"].point);
        assert_eq!(sensitivity_table(&runs[..1]).unwrap().len(), 1);
        let mut odd = runs.clone();
        odd[1].epsilon = 0.5;
        assert!(matches!(sensitivity_table(&odd), Err(Error::IncompatibleRuns(_))));
    }
}
