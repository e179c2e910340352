//! Conformal safety thresholds: one global threshold (HACO) and per-group
//! thresholds in coverage or harm mode.
//!
//! A state is safe when its risk score is strictly below the threshold of its
//! group, `p̂(s) < τ_g`. Empirical quantiles use the right-continuous inverse
//! `F̂⁻¹(q) = inf{t : F̂(t) ≥ q}`, i.e. the ⌈q·n⌉-th smallest score.
//!
//! * Coverage mode: `τ_g = F̂_g⁻¹(1 − α)` per group.
//! * Harm mode: `h̄` is the harm rate among calibration states below the
//!   global threshold; `τ_g` is the largest candidate cut whose in-group safe
//!   set is non-empty and has harm rate ≤ `h̄ + ε`.
//!
//! Groups with fewer than `min_group_n` calibration steps, and harm-mode
//! groups with no feasible cut, fall back to the global threshold.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::EpisodeSet;
use crate::error::{Error, Result};
use crate::risk::RiskModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Coverage,
    Harm,
    /// Single global threshold for every group (HACO).
    Global,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Coverage => "coverage",
            ThresholdMode::Harm => "harm",
            ThresholdMode::Global => "global",
        })
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(ThresholdMode::Coverage),
            "harm" => Ok(ThresholdMode::Harm),
            "global" => Ok(ThresholdMode::Global),
            other => Err(Error::InvalidArgument(format!("unknown threshold mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub min_group_n: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            alpha: 0.10,
            epsilon: 0.02,
            min_group_n: 200,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.min_group_n < 1 {
            return Err(Error::InvalidArgument("min_group_n must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub tau: f64,
    pub n: usize,
    pub fallback: bool,
    /// Calibration fraction with `p̂ < tau`.
    pub coverage: f64,
    /// Calibration harm rate inside the safe set (0 when it is empty).
    pub harm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub attribute: String,
    pub mode: ThresholdMode,
    pub alpha: f64,
    pub epsilon: f64,
    pub min_group_n: usize,
    pub global_tau: f64,
    pub h_bar: f64,
    pub groups: BTreeMap<String, GroupThreshold>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ThresholdTable {
    /// Threshold applied to a category; unseen or missing categories get the global τ.
    pub fn tau_for(&self, category: Option<&str>) -> f64 {
        category
            .and_then(|c| self.groups.get(c))
            .map_or(self.global_tau, |g| g.tau)
    }

    /// Non-fallback groups.
    pub fn calibrated_groups(&self) -> impl Iterator<Item = (&String, &GroupThreshold)> {
        self.groups.iter().filter(|(_, g)| !g.fallback)
    }
}

/// Index of the ⌈q·n⌉-th smallest element (0-based), clamped to the sample.
fn upper_rank(q: f64, n: usize) -> usize {
    // Guard against products such as 0.9 * 10 landing a hair above an integer.
    let k = (q * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n) - 1
}

/// Empirical quantile `inf{t ∈ scores : F̂(t) ≥ q}`.
pub fn empirical_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[upper_rank(q, sorted.len())])
}

/// HACO threshold: the (1 − α) empirical quantile of calibration scores.
pub fn global_threshold(calib_scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
    }
    empirical_quantile(calib_scores, 1.0 - alpha)
}

/// Safe-set coverage and harm rate of `(score, harm)` pairs under `tau`.
pub fn safe_set_stats(points: &[(f64, bool)], tau: f64) -> (f64, f64) {
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let (count, harms) = points
        .iter()
        .filter(|(s, _)| *s < tau)
        .fold((0usize, 0usize), |(c, h), (_, y)| (c + 1, h + *y as usize));
    let coverage = count as f64 / points.len() as f64;
    let harm = if count == 0 {
        0.0
    } else {
        harms as f64 / count as f64
    };
    (coverage, harm)
}

/// A cut strictly above every score.
pub fn sentinel_above(max_score: f64) -> f64 {
    if max_score < 1.0 {
        1.0
    } else {
        max_score.next_up()
    }
}

/// Largest candidate cut with a non-empty safe set whose harm rate is ≤ `cap`.
///
/// Candidates are the distinct scores plus a sentinel above the maximum. The
/// empirical harm rate is piecewise constant between observed scores, so no
/// other cut can do better.
pub fn harm_capped_threshold(points: &[(f64, bool)], cap: f64) -> Option<f64> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = None;
    let mut harms = 0usize;
    let mut i = 0;
    // Walk cut candidates in increasing order; before candidate sorted[i].0
    // the safe set is exactly sorted[..i].
    while i <= sorted.len() {
        let cut = if i < sorted.len() {
            sorted[i].0
        } else {
            sentinel_above(sorted.last().map_or(0.0, |p| p.0))
        };
        if i > 0 && harms as f64 / i as f64 <= cap {
            best = Some(cut);
        }
        if i == sorted.len() {
            break;
        }
        // Advance past every tie of this score.
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            harms += sorted[i].1 as usize;
            i += 1;
        }
    }
    best
}

struct CalibrationData {
    all: Vec<(f64, bool)>,
    by_group: BTreeMap<String, Vec<(f64, bool)>>,
}

fn collect(calib: &EpisodeSet, model: &RiskModel, attribute: &str) -> Result<CalibrationData> {
    if calib.n_steps() == 0 {
        return Err(Error::Empty("calibration slice"));
    }
    if !calib.catalog().contains(attribute) {
        return Err(Error::UnknownAttribute(attribute.to_string()));
    }
    let mut all = Vec::with_capacity(calib.n_steps());
    let mut by_group: BTreeMap<String, Vec<(f64, bool)>> = BTreeMap::new();
    for v in calib.views() {
        let point = (model.score(v.step, v.prev_reward), v.step.is_harm());
        all.push(point);
        if let Some(cat) = v.step.group(attribute) {
            by_group.entry(cat.to_string()).or_default().push(point);
        }
    }
    Ok(CalibrationData { all, by_group })
}

fn global_stats(data: &CalibrationData, alpha: f64) -> Result<(f64, f64)> {
    let scores: Vec<f64> = data.all.iter().map(|p| p.0).collect();
    let tau = global_threshold(&scores, alpha)?;
    let (_, h_bar) = safe_set_stats(&data.all, tau);
    Ok((tau, h_bar))
}

fn build_table(
    attribute: &str,
    mode: ThresholdMode,
    cfg: &CalibrationConfig,
    data: &CalibrationData,
    choose: impl Fn(&[(f64, bool)], f64, f64) -> Result<Option<f64>>,
) -> Result<ThresholdTable> {
    cfg.validate()?;
    let (global_tau, h_bar) = global_stats(data, cfg.alpha)?;
    let mut groups = BTreeMap::new();
    let mut warnings = Vec::new();
    for (cat, points) in &data.by_group {
        let n = points.len();
        let chosen = if n < cfg.min_group_n {
            None
        } else {
            let tau = choose(points, global_tau, h_bar)?;
            if tau.is_none() {
                let msg = format!(
                    "group {cat}: no non-empty safe set meets the harm cap {:.6}; using global threshold",
                    h_bar + cfg.epsilon
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            tau
        };
        let (tau, fallback) = match chosen {
            Some(t) => (t, false),
            None => (global_tau, true),
        };
        let (coverage, harm) = safe_set_stats(points, tau);
        groups.insert(
            cat.clone(),
            GroupThreshold {
                tau,
                n,
                fallback,
                coverage,
                harm,
            },
        );
    }
    Ok(ThresholdTable {
        attribute: attribute.to_string(),
        mode,
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        min_group_n: cfg.min_group_n,
        global_tau,
        h_bar,
        groups,
        warnings,
    })
}

/// Equal-coverage thresholds: per-group (1 − α) quantiles.
pub fn coverage_mode_thresholds(
    calib: &EpisodeSet,
    model: &RiskModel,
    attribute: &str,
    alpha: f64,
    min_group_n: usize,
) -> Result<ThresholdTable> {
    let cfg = CalibrationConfig {
        alpha,
        epsilon: 0.0,
        min_group_n,
    };
    let data = collect(calib, model, attribute)?;
    build_table(attribute, ThresholdMode::Coverage, &cfg, &data, |points, _, _| {
        let scores: Vec<f64> = points.iter().map(|p| p.0).collect();
        Ok(Some(empirical_quantile(&scores, 1.0 - alpha)?))
    })
}

/// Capped-harm thresholds: maximal coverage subject to harm ≤ h̄ + ε.
pub fn harm_mode_thresholds(
    calib: &EpisodeSet,
    model: &RiskModel,
    attribute: &str,
    alpha: f64,
    epsilon: f64,
    min_group_n: usize,
) -> Result<ThresholdTable> {
    let cfg = CalibrationConfig {
        alpha,
        epsilon,
        min_group_n,
    };
    let data = collect(calib, model, attribute)?;
    build_table(attribute, ThresholdMode::Harm, &cfg, &data, |points, _, h_bar| {
        Ok(harm_capped_threshold(points, h_bar + epsilon))
    })
}

/// HACO table: the global threshold for every group, with per-group diagnostics.
pub fn global_mode_thresholds(
    calib: &EpisodeSet,
    model: &RiskModel,
    attribute: &str,
    alpha: f64,
) -> Result<ThresholdTable> {
    let cfg = CalibrationConfig {
        alpha,
        epsilon: 0.0,
        min_group_n: 1,
    };
    let data = collect(calib, model, attribute)?;
    build_table(attribute, ThresholdMode::Global, &cfg, &data, |_, global_tau, _| {
        Ok(Some(global_tau))
    })
}

/// Dispatches on `mode`.
pub fn calibrate(
    calib: &EpisodeSet,
    model: &RiskModel,
    attribute: &str,
    mode: ThresholdMode,
    cfg: &CalibrationConfig,
) -> Result<ThresholdTable> {
    cfg.validate()?;
    match mode {
        ThresholdMode::Coverage => {
            let mut t = coverage_mode_thresholds(calib, model, attribute, cfg.alpha, cfg.min_group_n)?;
            t.epsilon = cfg.epsilon;
            Ok(t)
        }
        ThresholdMode::Harm => harm_mode_thresholds(
            calib,
            model,
            attribute,
            cfg.alpha,
            cfg.epsilon,
            cfg.min_group_n,
        ),
        ThresholdMode::Global => global_mode_thresholds(calib, model, attribute, cfg.alpha),
    }
}

/// Per-step safety under `table` (episode-major order).
pub fn safe_mask(data: &EpisodeSet, model: &RiskModel, table: &ThresholdTable) -> Vec<bool> {
    data.views()
        .map(|v| model.score(v.step, v.prev_reward) < table.tau_for(v.step.group(&table.attribute)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBound {
    pub n: usize,
    pub delta: f64,
    pub dkw_epsilon: f64,
    pub wilson_interval: Option<(f64, f64)>,
}

impl CoverageBound {
    /// Attaches the Wilson interval (level 1 − δ) for an observed proportion.
    pub fn with_observed(mut self, proportion: f64) -> Result<Self> {
        self.wilson_interval = Some(wilson_interval(proportion, self.n, 1.0 - self.delta)?);
        Ok(self)
    }
}

/// DKW deviation `sqrt(ln(2/δ) / (2n))`.
pub fn dkw_bound(n: usize, delta: f64) -> Result<CoverageBound> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0,1), got {delta}")));
    }
    Ok(CoverageBound {
        n,
        delta,
        dkw_epsilon: ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt(),
        wilson_interval: None,
    })
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(proportion: f64, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 || !(0.0..=1.0).contains(&proportion) || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "wilson interval needs n >= 1, p in [0,1], level in (0,1); got n={n}, p={proportion}, level={level}"
        )));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let n = n as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (proportion + z2 / (2.0 * n)) / denom;
    let half = z / denom * (proportion * (1.0 - proportion) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionId, Episode, TrajectoryStep};
    use crate::features::{FeatureMap, FeatureSpec};
    use proptest::prelude::*;

    #[test]
    fn quantile_convention() {
        let s = [0.5, 0.1, 0.4, 0.2, 0.3];
        assert_eq!(global_threshold(&s, 0.2).unwrap(), 0.4);
        assert_eq!(global_threshold(&s, 1e-9).unwrap(), 0.5);
        assert_eq!(global_threshold(&s, 0.999).unwrap(), 0.1);
        assert!(global_threshold(&[], 0.1).is_err());
        assert!(global_threshold(&s, 0.0).is_err());
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0], 0.9).unwrap(), 9.0);
    }

    #[test]
    fn dkw_values() {
        let b = dkw_bound(1, 2.0 / std::f64::consts::E.powi(2)).unwrap();
        assert!((b.dkw_epsilon - 1.0).abs() < 1e-15);
        let a = dkw_bound(50, 0.1).unwrap().dkw_epsilon;
        let c = dkw_bound(200, 0.1).unwrap().dkw_epsilon;
        assert!((a / 2.0 - c).abs() < 1e-15);
        assert!(dkw_bound(0, 0.1).is_err());
        assert!(dkw_bound(10, 1.0).is_err());
    }

    #[test]
    fn wilson_inside_unit_interval() {
        for p in [0.0, 0.01, 0.5, 0.99, 1.0] {
            let (lo, hi) = wilson_interval(p, 30, 0.95).unwrap();
            assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
        }
        // Textbook value: 8/10 at 95% → (0.4902, 0.9433).
        let (lo, hi) = wilson_interval(0.8, 10, 0.95).unwrap();
        assert!((lo - 0.4902).abs() < 1e-4 && (hi - 0.9433).abs() < 1e-4);
        let b = dkw_bound(100, 0.05).unwrap().with_observed(0.9).unwrap();
        assert!(b.wilson_interval.is_some());
    }

    #[test]
    fn harm_cap_vacuous_and_tight() {
        let pts = [(0.1, false), (0.2, true), (0.3, false), (0.4, true)];
        assert_eq!(harm_capped_threshold(&pts, 1.0), Some(1.0));
        // cap 0: only the set {0.1} has zero harm; cut 0.2 gives it.
        assert_eq!(harm_capped_threshold(&pts, 0.0), Some(0.2));
        // cap 0.5: {0.1,0.2,0.3,0.4} has 0.5 → sentinel.
        assert_eq!(harm_capped_threshold(&pts, 0.5), Some(1.0));
        assert_eq!(harm_capped_threshold(&[(0.1, true)], 0.0), None);
        assert_eq!(harm_capped_threshold(&[], 0.5), None);
    }

    #[test]
    fn sentinel_is_strictly_above() {
        assert_eq!(sentinel_above(0.7), 1.0);
        assert!(sentinel_above(1.0) > 1.0);
    }

    fn calib_set(points: &[(f64, bool, &str)]) -> (EpisodeSet, RiskModel) {
        // Score σ(x) with identity weights on a single feature `z` holding the logit.
        let episodes = points
            .iter()
            .enumerate()
            .map(|(i, &(p, harm, g))| Episode {
                id: format!("e{i}"),
                steps: vec![TrajectoryStep {
                    episode_id: format!("e{i}"),
                    t: 0,
                    action: ActionId::new(0).unwrap(),
                    reward: if harm { -1.0 } else { 0.0 },
                    state: [("z".to_string(), (p / (1.0 - p)).ln())].into(),
                    groups: [("g".to_string(), g.to_string())].into(),
                }],
            })
            .collect();
        let set = EpisodeSet::from_episodes(episodes).unwrap();
        let map = FeatureMap::raw(FeatureSpec::new(vec!["z".into()], false, false, false).unwrap());
        let model = RiskModel::from_weights(vec![1.0, 0.0], map).unwrap();
        (set, model)
    }

    #[test]
    fn single_group_matches_global() {
        let pts: Vec<(f64, bool, &str)> = (1..=20).map(|i| (i as f64 / 21.0, i % 4 == 0, "a")).collect();
        let (set, model) = calib_set(&pts);
        let t = coverage_mode_thresholds(&set, &model, "g", 0.1, 1).unwrap();
        let g = &t.groups["a"];
        assert_eq!(g.tau, t.global_tau);
        assert!(!g.fallback);
        let h = global_mode_thresholds(&set, &model, "g", 0.1).unwrap();
        assert_eq!(h.groups["a"].coverage, g.coverage);
    }

    #[test]
    fn small_group_falls_back() {
        let mut pts: Vec<(f64, bool, &str)> = (1..=30).map(|i| (i as f64 / 31.0, i % 5 == 0, "big")).collect();
        pts.extend((1..=4).map(|i| (i as f64 / 50.0, false, "small")));
        let (set, model) = calib_set(&pts);
        let t = coverage_mode_thresholds(&set, &model, "g", 0.1, 5).unwrap();
        assert!(t.groups["small"].fallback);
        assert_eq!(t.groups["small"].tau, t.global_tau);
        assert!(!t.groups["big"].fallback);
        let t = coverage_mode_thresholds(&set, &model, "g", 0.1, 4).unwrap();
        assert!(!t.groups["small"].fallback);
    }

    #[test]
    fn harm_mode_identical_group_is_feasible_at_global() {
        let pts: Vec<(f64, bool, &str)> = (1..=40).map(|i| (i as f64 / 41.0, i % 3 == 0, "a")).collect();
        let (set, model) = calib_set(&pts);
        let t = harm_mode_thresholds(&set, &model, "g", 0.1, 0.0, 1).unwrap();
        let g = &t.groups["a"];
        assert!(g.tau >= t.global_tau);
        assert!(g.harm <= t.h_bar);
        let loose = harm_mode_thresholds(&set, &model, "g", 0.1, 10.0, 1).unwrap();
        assert_eq!(loose.groups["a"].tau, 1.0);
        assert_eq!(loose.groups["a"].coverage, 1.0);
    }

    #[test]
    fn harm_mode_infeasible_falls_back_with_warning() {
        // Group b: every state harmful, so no non-empty safe set meets a low cap.
        let mut pts: Vec<(f64, bool, &str)> = (1..=20).map(|i| (i as f64 / 21.0, i == 20, "a")).collect();
        pts.extend((1..=5).map(|i| (i as f64 / 30.0, true, "b")));
        let (set, model) = calib_set(&pts);
        let t = harm_mode_thresholds(&set, &model, "g", 0.1, 0.0, 1).unwrap();
        assert!(t.groups["b"].fallback);
        assert_eq!(t.groups["b"].tau, t.global_tau);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn mask_extremes_and_unseen_categories() {
        let pts: Vec<(f64, bool, &str)> = (1..=10).map(|i| (i as f64 / 11.0, false, "a")).collect();
        let (set, model) = calib_set(&pts);
        let mut t = coverage_mode_thresholds(&set, &model, "g", 0.1, 1).unwrap();
        t.groups.get_mut("a").unwrap().tau = 1.0;
        assert!(safe_mask(&set, &model, &t).iter().all(|&b| b));
        t.groups.get_mut("a").unwrap().tau = 0.0;
        assert!(safe_mask(&set, &model, &t).iter().all(|&b| !b));
        assert_eq!(t.tau_for(Some("zzz")), t.global_tau);
        assert_eq!(t.tau_for(None), t.global_tau);
    }

    #[test]
    fn errors() {
        let (set, model) = calib_set(&[(0.3, false, "a")]);
        assert!(matches!(
            coverage_mode_thresholds(&set, &model, "nope", 0.1, 1),
            Err(Error::UnknownAttribute(_))
        ));
        assert!(coverage_mode_thresholds(&EpisodeSet::empty(), &model, "g", 0.1, 1).is_err());
    }

    #[test]
    fn table_json_keys() {
        let pts: Vec<(f64, bool, &str)> = (1..=10).map(|i| (i as f64 / 11.0, i == 3, "a")).collect();
        let (set, model) = calib_set(&pts);
        let t = harm_mode_thresholds(&set, &model, "g", 0.1, 0.02, 1).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        for k in ["attribute", "mode", "alpha", "epsilon", "global_tau", "h_bar", "groups"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["mode"], "harm");
        for k in ["tau", "n", "fallback", "coverage", "harm"] {
            assert!(v["groups"]["a"].get(k).is_some(), "{k}");
        }
    }

    fn brute_force_cut(points: &[(f64, bool)], cap: f64) -> Option<f64> {
        let mut cands: Vec<f64> = points.iter().map(|p| p.0).collect();
        cands.push(sentinel_above(cands.iter().cloned().fold(0.0, f64::max)));
        cands
            .into_iter()
            .filter(|&c| {
                let safe: Vec<_> = points.iter().filter(|p| p.0 < c).collect();
                !safe.is_empty() && safe.iter().filter(|p| p.1).count() as f64 / safe.len() as f64 <= cap
            })
            .fold(None, |best: Option<f64>, c| Some(best.map_or(c, |b| b.max(c))))
    }

    proptest! {
        #[test]
        fn coverage_quantile_guarantee(scores in prop::collection::vec(0.0f64..1.0, 1..300), alpha in 0.01f64..0.99) {
            let mut uniq = scores.clone();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            prop_assume!(uniq.len() == scores.len());
            let tau = global_threshold(&scores, alpha).unwrap();
            let n = scores.len() as f64;
            let cov = scores.iter().filter(|&&s| s < tau).count() as f64 / n;
            prop_assert!(cov >= 1.0 - alpha - 1.0 / n - 1e-12);
            let le = scores.iter().filter(|&&s| s <= tau).count() as f64 / n;
            prop_assert!(le >= 1.0 - alpha - 1e-12);
        }

        #[test]
        fn threshold_monotone_in_alpha(scores in prop::collection::vec(0.0f64..1.0, 1..200), a in 0.01f64..0.98, d in 0.0f64..0.5) {
            let b = (a + d).min(0.99);
            prop_assert!(global_threshold(&scores, b).unwrap() <= global_threshold(&scores, a).unwrap());
        }

        #[test]
        fn harm_search_matches_brute_force(
            pts in prop::collection::vec((0u8..20, any::<bool>()), 1..40),
            cap in 0.0f64..1.0,
        ) {
            let pts: Vec<(f64, bool)> = pts.into_iter().map(|(s, y)| (s as f64 / 20.0, y)).collect();
            prop_assert_eq!(harm_capped_threshold(&pts, cap), brute_force_cut(&pts, cap));
        }

        #[test]
        fn harm_cut_monotone_in_cap(
            pts in prop::collection::vec((0u8..50, any::<bool>()), 1..60),
            cap in 0.0f64..0.8, extra in 0.0f64..0.5,
        ) {
            let pts: Vec<(f64, bool)> = pts.into_iter().map(|(s, y)| (s as f64 / 50.0, y)).collect();
            if let Some(lo) = harm_capped_threshold(&pts, cap) {
                let hi = harm_capped_threshold(&pts, cap + extra).unwrap();
                prop_assert!(hi >= lo);
            }
        }
    }
}
