//! Pipeline commands: `run`, `sweep`, `synth` and `report`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, FairWeighting, RunConfig};
use crate::calibrate::{self, safe_mask, ThresholdTable};
use crate::data::{self, EpisodeSet};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::ope::{self, Estimator, FQEModel};
use crate::policy::{self, LinearPolicy, MaskDescriptor, SampleWeights};
use crate::report::{self, PolicyEstimates, RunArtifacts, RunSummary, SensitivityRow, LOGGED_POLICY};
use crate::risk::{self, RiskModel};
use crate::seeding::{self, streams};
use crate::synthdata;

pub const CONFIG_ECHO_FILE: &str = "config.resolved";
pub const RISK_MODEL_FILE: &str = "risk_model.json";
pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
pub const SENSITIVITY_JSON: &str = "sensitivity.json";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub summary: RunSummary,
    pub artifacts: RunArtifacts,
}

struct Stages {
    timings: BTreeMap<String, f64>,
}

impl Stages {
    /// Runs one stage, recording its wall-clock time and tagging failures.
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        let out = f().map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: name,
                source: Box::new(other),
            },
        });
        *self.timings.entry(name.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<EpisodeSet> {
    match &cfg.data {
        DataSource::File(p) => data::load_dataset(p),
        DataSource::Generator(g) => synthdata::generate(g),
    }
}

/// Affine map of rewards onto `[−1, 0]` using the train range: `(r − max)/(max − min)`.
pub fn reward_normalizer(train: &EpisodeSet) -> Option<(f64, f64)> {
    let (lo, hi) = train
        .steps()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.reward), hi.max(s.reward)));
    (hi > lo).then_some((lo, hi))
}

fn normalize(data: &EpisodeSet, range: Option<(f64, f64)>) -> EpisodeSet {
    match range {
        Some((lo, hi)) => data.map_rewards(|r| (r - hi) / (hi - lo)),
        None => data.clone(),
    }
}

fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    report::write_json(path, value)
}

/// The four reported policies plus the behavior model, in training order.
pub struct TrainedPolicies {
    pub fg_farl: LinearPolicy,
    pub haco: LinearPolicy,
    pub bc: LinearPolicy,
    pub fair_bc: LinearPolicy,
    pub mu: LinearPolicy,
}

impl TrainedPolicies {
    pub fn reported(&self) -> [(&'static str, &LinearPolicy); 4] {
        [
            ("fg_farl", &self.fg_farl),
            ("haco", &self.haco),
            ("bc", &self.bc),
            ("fair_bc", &self.fair_bc),
        ]
    }
}

/// Training mask, sample weights and descriptor of one policy.
type PolicyJob<'a> = (Option<&'a [bool]>, Option<&'a SampleWeights>, MaskDescriptor);

/// Trains every policy on `data` (rewards already transformed), using masks
/// computed on `raw` with the risk model.
#[allow(clippy::too_many_arguments)]
pub fn train_policies(
    cfg: &RunConfig,
    attribute: &str,
    raw: &EpisodeSet,
    data: &EpisodeSet,
    behavior_data: &EpisodeSet,
    map: &FeatureMap,
    model: &RiskModel,
    table: &ThresholdTable,
    haco_table: &ThresholdTable,
) -> Result<TrainedPolicies> {
    let fg_mask = safe_mask(raw, model, table);
    let haco_mask = safe_mask(raw, model, haco_table);
    let weights: SampleWeights = match cfg.fair_bc_weighting {
        FairWeighting::SafeFraction => policy::fair_bc_weights(data, &fg_mask, attribute)?,
        FairWeighting::GroupBalanced => policy::group_balanced_weights(data, &fg_mask, attribute)?,
    };
    let pc = &cfg.policy;
    let jobs: Vec<PolicyJob> = vec![
        (Some(&fg_mask), None, MaskDescriptor::SafeUnion),
        (Some(&haco_mask), None, MaskDescriptor::SafeUnion),
        (None, None, MaskDescriptor::All),
        (Some(&fg_mask), Some(&weights), MaskDescriptor::SafeUnionReweighted),
    ];
    let mut trained: Vec<LinearPolicy> = jobs
        .into_par_iter()
        .map(|(mask, w, d)| policy::train_policy(data, mask, map, w, pc, d))
        .collect::<Result<_>>()?;
    let mu = if std::ptr::eq(data, behavior_data) {
        trained[2].relabeled(MaskDescriptor::Behavior)
    } else {
        policy::train_policy(behavior_data, None, map, None, pc, MaskDescriptor::Behavior)?
    };
    let fair_bc = trained.pop().expect("four policies");
    let bc = trained.pop().expect("four policies");
    let haco = trained.pop().expect("four policies");
    let fg_farl = trained.pop().expect("four policies");
    Ok(TrainedPolicies {
        fg_farl,
        haco,
        bc,
        fair_bc,
        mu,
    })
}

/// Full pipeline for one configuration; artifacts land in `out_dir/run_label`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let mut stages = Stages {
        timings: BTreeMap::new(),
    };
    let data = stages.run("data", || load_data(&cfg))?;
    cfg.resolve(&data)?;
    let attribute = cfg.attribute()?.to_string();
    if !data.catalog().contains(&attribute) {
        return Err(Error::Config(format!("attribute {attribute} does not occur in the data")));
    }
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_text()).map_err(|e| Error::io(&dir, e))?;

    let splits = stages.run("split", || data::split(&data, &cfg.split_spec()))?;
    let model = stages.run("risk", || {
        let spec = cfg.risk_features.spec(&splits.train)?;
        let m = risk::train_risk(&splits.train, &spec, &cfg.risk)?;
        save_json(&dir.join(RISK_MODEL_FILE), &m)?;
        Ok(m)
    })?;
    let (table, haco_table) = stages.run("calibrate", || {
        let t = calibrate::calibrate(&splits.calib, &model, &attribute, cfg.mode, &cfg.calibration)?;
        let h = calibrate::global_mode_thresholds(&splits.calib, &model, &attribute, cfg.calibration.alpha)?;
        save_json(&dir.join(report::THRESHOLDS_FILE), &t)?;
        save_json(&dir.join(report::HACO_THRESHOLDS_FILE), &h)?;
        Ok((t, h))
    })?;

    // Reward normalization touches only what follows risk scoring and calibration.
    let range = if cfg.reward_norm {
        reward_normalizer(&splits.train)
    } else {
        None
    };
    let train = normalize(&splits.train, range);
    let test = normalize(&splits.test, range);
    let (policy_raw, policy_data) = if cfg.policy_include_calib {
        let raw = EpisodeSet::concat(&[&splits.train, &splits.calib])?;
        let norm = normalize(&raw, range);
        (raw, norm)
    } else {
        (splits.train.clone(), train.clone())
    };

    let (map, policies) = stages.run("policy", || {
        let spec = cfg.policy_features.spec(&policy_data)?;
        let map = FeatureMap::fit(&policy_data, &spec)?;
        let behavior_data = if cfg.policy_include_calib { &train } else { &policy_data };
        let p = train_policies(
            &cfg,
            &attribute,
            &policy_raw,
            &policy_data,
            behavior_data,
            &map,
            &model,
            &table,
            &haco_table,
        )?;
        for (name, pol) in p.reported().into_iter().chain([("mu", &p.mu)]) {
            pol.save(&dir.join(format!("policy_{name}.json")))?;
            let rows = policy::top_coefficients(pol, cfg.top_k)?;
            policy::write_coefficients_csv(&rows, &dir.join(format!("top_coefficients_{name}.csv")))?;
        }
        Ok((map, p))
    })?;

    let fqes: Vec<(&'static str, FQEModel, f64)> = stages.run("fqe", || {
        policies
            .reported()
            .into_par_iter()
            .map(|(name, pol)| {
                let fqe = ope::fit_fqe(&train, pol, &map, &cfg.fqe)?;
                let v = ope::v0(&fqe, &test, pol)?;
                save_json(&dir.join(format!("fqe_{name}.json")), &fqe)?;
                Ok((name, fqe, v))
            })
            .collect()
    })?;

    let (estimates, subgroups) = stages.run("dr", || {
        let boot_seed = seeding::derive(cfg.seed, streams::BOOTSTRAP);
        let sub_seed = seeding::derive(cfg.seed, streams::SUBGROUP);
        let gamma = cfg.fqe.gamma;
        let mut estimates = Vec::new();
        let mut subgroups = BTreeMap::new();
        for ((name, pol), (_, fqe, v0)) in policies.reported().into_iter().zip(&fqes) {
            let terms = ope::episode_terms(&test, pol, &policies.mu, fqe, cfg.rho_max);
            let dr = ope::doubly_robust(&terms, gamma, false);
            let sn = ope::doubly_robust(&terms, gamma, true);
            estimates.push(PolicyEstimates {
                policy: name.to_string(),
                v0: *v0,
                dr: ope::bootstrap_ci(&dr, &cfg.bootstrap, boot_seed, Estimator::Dr)?,
                dr_selfnorm: ope::bootstrap_ci(&sn, &cfg.bootstrap, boot_seed, Estimator::DrSelfnorm)?,
            });
            subgroups.insert(
                name.to_string(),
                ope::subgroup_stats(&test, &attribute, &dr, &cfg.bootstrap, sub_seed)?,
            );
        }
        let returns = ope::episodic_returns(&test);
        subgroups.insert(
            LOGGED_POLICY.to_string(),
            ope::subgroup_stats(&test, &attribute, &returns, &cfg.bootstrap, sub_seed)?,
        );
        Ok((estimates, subgroups))
    })?;

    let artifacts = RunArtifacts {
        run_label: cfg.run_label.clone(),
        thresholds: table,
        haco_thresholds: haco_table,
        policies: estimates,
        subgroups,
    };
    let report_start = Instant::now();
    let mut summary = stages.run("report", || {
        artifacts.save(&dir)?;
        report::emit_plot_data(&artifacts, &dir)?;
        report::summarize(&artifacts, BTreeMap::new())
    })?;
    // The report stage's own time includes writing the summary below.
    stages
        .timings
        .insert("report".into(), report_start.elapsed().as_secs_f64());
    summary.stage_timings = stages.timings.clone();
    report::write_summary(&summary, &dir, cfg.write_timings).map_err(|e| Error::Stage {
        stage: "report",
        source: Box::new(e),
    })?;
    Ok(RunOutcome {
        dir,
        config: cfg,
        summary,
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub alpha: f64,
    pub epsilon: f64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub rows: Vec<SensitivityRow>,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<SweepFailure>,
}

pub fn sweep_label(alpha: f64, epsilon: f64) -> String {
    format!("alpha{alpha}_eps{epsilon}")
}

/// One run per (α, ε) grid point under `out_dir/run_label`, plus a
/// sensitivity table per ε. Failed runs are recorded and skipped.
pub fn cmd_sweep(cfg: &RunConfig, alphas: &[f64], epsilons: &[f64]) -> Result<SweepOutcome> {
    if alphas.is_empty() || epsilons.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let root = cfg.run_dir();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let grid: Vec<(f64, f64)> = epsilons
        .iter()
        .flat_map(|&e| alphas.iter().map(move |&a| (a, e)))
        .collect();
    let results: Vec<(f64, f64, Result<RunOutcome>)> = grid
        .par_iter()
        .map(|&(alpha, epsilon)| {
            let mut sub = cfg.clone();
            sub.calibration.alpha = alpha;
            sub.calibration.epsilon = epsilon;
            sub.out_dir = root.clone();
            sub.run_label = sweep_label(alpha, epsilon);
            (alpha, epsilon, cmd_run(&sub))
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (alpha, epsilon, r) in results {
        match r {
            Ok(o) => runs.push(o),
            Err(e) => {
                log::error!("sweep point alpha={alpha} epsilon={epsilon} failed: {e}");
                failures.push(SweepFailure {
                    alpha,
                    epsilon,
                    error: e.to_string(),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for &eps in epsilons {
        let group: Vec<RunSummary> = runs
            .iter()
            .filter(|o| o.summary.epsilon == eps)
            .map(|o| o.summary.clone())
            .collect();
        if !group.is_empty() {
            rows.extend(report::sensitivity_table(&group)?);
        }
    }
    report::write_sensitivity_csv(&rows, &root.join(SENSITIVITY_CSV))?;
    save_json(&root.join(SENSITIVITY_JSON), &serde_json::json!({ "rows": rows, "failures": failures }))?;
    Ok(SweepOutcome {
        dir: root,
        rows,
        runs,
        failures,
    })
}

/// Writes generated data and its ground-truth sidecar; returns the sidecar path.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    match &cfg.data {
        DataSource::Generator(g) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            synthdata::write_synthetic(g, out, cfg.calibration.alpha, cfg.calibration.epsilon)
        }
        DataSource::File(_) => Err(Error::Config("synth needs a generator source (synth.preset or synth.config_json)".into())),
    }
}

/// Re-emits the summary and plot data of a finished run from its artifacts.
pub fn cmd_report(dir: &Path) -> Result<RunSummary> {
    let artifacts = RunArtifacts::load(dir)?;
    let timings_path = dir.join(report::TIMINGS_FILE);
    let has_timings = timings_path.exists();
    let timings = if has_timings {
        report::load_summary(dir).map(|s| s.stage_timings).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let summary = report::summarize(&artifacts, timings)?;
    report::write_summary(&summary, dir, has_timings)?;
    report::emit_plot_data(&artifacts, dir)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::GeneratorConfig;

    #[test]
    fn reward_normalization_maps_range_to_unit_interval() {
        let data = synthdata::generate(&GeneratorConfig::standard(50, 1)).unwrap();
        let shifted = data.map_rewards(|r| 3.0 * r + 2.0);
        let range = reward_normalizer(&shifted).unwrap();
        assert_eq!(range, (-1.0, 2.0));
        let norm = normalize(&shifted, Some(range));
        for (a, b) in norm.steps().zip(data.steps()) {
            assert!((a.reward - b.reward).abs() < 1e-12);
        }
        let flat = data.map_rewards(|_| 0.0);
        assert_eq!(reward_normalizer(&flat), None);
    }

    #[test]
    fn sweep_labels_are_distinct() {
        assert_eq!(sweep_label(0.05, 0.02), "alpha0.05_eps0.02");
        assert_ne!(sweep_label(0.1, 0.02), sweep_label(0.1, 0.05));
    }
}
