//! Synthetic logged trajectories with known ground truth.
//!
//! Every step exposes the generator feature vector `x = [t, prev_r, c1..ck, 1]`.
//! Covariates follow a stationary AR(1) around a group-dependent mean, so
//! their marginal at every step is `N(μ_g, 1)`. Actions come from a known
//! softmax behavior policy over `x`; harm is Bernoulli with probability
//! `σ(w·x + shift_g + effect[a] + m·c1²)` and yields `harm_reward`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionId, Episode, EpisodeSet, TrajectoryStep, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::optim::{dot, sigmoid, softmax};
use crate::policy::{LinearPolicy, MaskDescriptor};
use crate::risk::RiskModel;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub attribute: String,
    pub categories: Vec<String>,
    pub proportions: Vec<f64>,
}

/// How episodes are assigned to categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// Independent categorical draw per episode.
    #[default]
    Sampled,
    /// Exact largest-remainder counts, randomly permuted.
    Quota,
}

/// `attribute → category → value`.
pub type GroupMap = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_episodes: usize,
    pub horizon: u32,
    pub n_covariates: usize,
    /// AR(1) coefficient of the covariate process, in (−1, 1).
    pub ar_coef: f64,
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub allocation: Allocation,
    /// Logistic harm weights over `[t, prev_r, c1..ck, 1]`.
    pub true_risk_weights: Vec<f64>,
    #[serde(default)]
    pub group_risk_shift: GroupMap,
    /// Additive shift of every covariate's mean.
    #[serde(default)]
    pub group_covariate_shift: GroupMap,
    /// Additive harm logit per action.
    #[serde(default = "zero_effects")]
    pub action_harm_effect: Vec<f64>,
    /// Softmax parameters, 9 rows over `[t, prev_r, c1..ck, 1]`.
    pub behavior_policy: Vec<Vec<f64>>,
    pub harm_reward: f64,
    /// Coefficient of an extra `c1²` harm term the linear risk model cannot express.
    #[serde(default)]
    pub misspecification: f64,
    pub seed: u64,
}

fn zero_effects() -> Vec<f64> {
    vec![0.0; NUM_ACTIONS]
}

/// One joint assignment of every attribute.
#[derive(Debug, Clone, PartialEq)]
struct Combo {
    labels: BTreeMap<String, String>,
    prob: f64,
    risk_shift: f64,
    covariate_shift: f64,
}

fn shift_of(map: &GroupMap, labels: &BTreeMap<String, String>) -> f64 {
    labels
        .iter()
        .filter_map(|(a, c)| map.get(a).and_then(|m| m.get(c)))
        .sum()
}

/// Largest-remainder integer counts summing to `n`.
fn quota_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())).then(i.cmp(&j)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

impl GeneratorConfig {
    /// Two groups, two covariates, a moderately informative behavior policy
    /// and action-dependent harm.
    pub fn standard(n_episodes: usize, seed: u64) -> Self {
        let mut behavior = vec![vec![0.0; 5]; NUM_ACTIONS];
        for (a, row) in behavior.iter_mut().enumerate().take(NUM_ACTIONS - 1) {
            let centered = a as f64 - 4.0;
            *row = vec![0.0, 0.3 * centered / 4.0, 0.25 * centered / 4.0, -0.2 * centered / 4.0, 0.1];
        }
        GeneratorConfig {
            n_episodes,
            horizon: 10,
            n_covariates: 2,
            ar_coef: 0.7,
            groups: vec![GroupSpec {
                attribute: "group".into(),
                categories: vec!["A".into(), "B".into()],
                proportions: vec![0.6, 0.4],
            }],
            allocation: Allocation::Sampled,
            true_risk_weights: vec![0.02, -0.5, 0.6, -0.4, -2.2],
            group_risk_shift: [("group".to_string(), [("B".to_string(), 0.4)].into())].into(),
            group_covariate_shift: [("group".to_string(), [("B".to_string(), 0.3)].into())].into(),
            action_harm_effect: (0..NUM_ACTIONS).map(|a| 0.1 * (a as f64 - 4.0)).collect(),
            behavior_policy: behavior,
            harm_reward: -1.0,
            misspecification: 0.0,
            seed,
        }
    }

    /// Five race categories with the fixed episode counts
    /// {Asian 99, Black 430, Hispanic 111, Other 647, White 713}.
    pub fn five_group(seed: u64) -> Self {
        let counts = [("Asian", 99.0), ("Black", 430.0), ("Hispanic", 111.0), ("Other", 647.0), ("White", 713.0)];
        let total: f64 = counts.iter().map(|c| c.1).sum();
        let mut cfg = Self::standard(total as usize, seed);
        cfg.horizon = 12;
        cfg.groups = vec![GroupSpec {
            attribute: "race".into(),
            categories: counts.iter().map(|c| c.0.to_string()).collect(),
            proportions: counts.iter().map(|c| c.1 / total).collect(),
        }];
        cfg.allocation = Allocation::Quota;
        cfg.group_risk_shift = [(
            "race".to_string(),
            [("Asian", -0.2), ("Black", 0.35), ("Hispanic", 0.15), ("Other", 0.0), ("White", -0.1)]
                .into_iter()
                .map(|(c, v)| (c.to_string(), v))
                .collect(),
        )]
        .into();
        cfg.group_covariate_shift = [(
            "race".to_string(),
            [("Black".to_string(), 0.2), ("Asian".to_string(), -0.1)].into(),
        )]
        .into();
        cfg
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard(2000, seed)),
            "five-group" => Ok(Self::five_group(seed)),
            other => Err(Error::Config(format!("unknown generator preset {other}"))),
        }
    }

    /// Length of the generator feature vector.
    pub fn feature_dim(&self) -> usize {
        self.n_covariates + 3
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.n_covariates).map(|j| format!("c{j}")).collect()
    }

    /// Raw (unstandardized) feature spec whose layout matches the generator vector.
    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            state_features: self.covariate_names(),
            include_time: true,
            include_prev_reward: true,
            standardize: false,
        }
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::raw(self.feature_spec())
    }

    /// Risk model scoring with the true weights (group shift, action effects
    /// and the quadratic term excluded).
    pub fn true_risk_model(&self) -> Result<RiskModel> {
        RiskModel::from_weights(self.true_risk_weights.clone(), self.feature_map())
    }

    pub fn behavior_policy(&self) -> Result<LinearPolicy> {
        LinearPolicy::from_theta(self.behavior_policy.clone(), self.feature_map(), MaskDescriptor::Behavior)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.ar_coef > -1.0 && self.ar_coef < 1.0) {
            return bad(format!("ar_coef must be in (-1,1), got {}", self.ar_coef));
        }
        if !(self.harm_reward < 0.0) {
            return bad(format!("harm_reward must be < 0, got {}", self.harm_reward));
        }
        let d = self.feature_dim();
        if self.true_risk_weights.len() != d {
            return bad(format!("true_risk_weights needs {d} entries"));
        }
        if self.behavior_policy.len() != NUM_ACTIONS || self.behavior_policy.iter().any(|r| r.len() != d) {
            return bad(format!("behavior_policy must be {NUM_ACTIONS} x {d}"));
        }
        if self.action_harm_effect.len() != NUM_ACTIONS {
            return bad(format!("action_harm_effect needs {NUM_ACTIONS} entries"));
        }
        let all_finite = self.true_risk_weights.iter().chain(self.behavior_policy.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return bad("generator parameters must be finite".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            if !seen.insert(&g.attribute) {
                return bad(format!("attribute {} listed twice", g.attribute));
            }
            if g.categories.is_empty() || g.categories.len() != g.proportions.len() {
                return bad(format!("attribute {}: categories and proportions must match", g.attribute));
            }
            let cats: std::collections::BTreeSet<_> = g.categories.iter().collect();
            if cats.len() != g.categories.len() {
                return bad(format!("attribute {}: duplicate categories", g.attribute));
            }
            if g.proportions.iter().any(|p| !(*p >= 0.0)) || (g.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("attribute {}: proportions must be >= 0 and sum to 1", g.attribute));
            }
        }
        for (name, map) in [("group_risk_shift", &self.group_risk_shift), ("group_covariate_shift", &self.group_covariate_shift)] {
            for (attr, cats) in map {
                let Some(g) = self.groups.iter().find(|g| &g.attribute == attr) else {
                    return bad(format!("{name}: unknown attribute {attr}"));
                };
                if let Some(c) = cats.keys().find(|c| !g.categories.contains(c)) {
                    return bad(format!("{name}: unknown category {c} of {attr}"));
                }
            }
        }
        Ok(())
    }

    fn combos(&self) -> Vec<Combo> {
        let mut out = vec![Combo {
            labels: BTreeMap::new(),
            prob: 1.0,
            risk_shift: 0.0,
            covariate_shift: 0.0,
        }];
        for g in &self.groups {
            out = out
                .into_iter()
                .flat_map(|c| {
                    g.categories.iter().zip(&g.proportions).map(move |(cat, p)| {
                        let mut labels = c.labels.clone();
                        labels.insert(g.attribute.clone(), cat.clone());
                        Combo {
                            labels,
                            prob: c.prob * p,
                            risk_shift: 0.0,
                            covariate_shift: 0.0,
                        }
                    })
                })
                .collect();
        }
        for c in &mut out {
            c.risk_shift = shift_of(&self.group_risk_shift, &c.labels);
            c.covariate_shift = shift_of(&self.group_covariate_shift, &c.labels);
        }
        out
    }

    /// Category labels of every episode.
    fn assign_labels(&self) -> Vec<BTreeMap<String, String>> {
        let mut rng = seeding::stream(seeding::derive(self.seed, seeding::streams::GENERATOR), u64::MAX);
        let mut labels = vec![BTreeMap::new(); self.n_episodes];
        for g in &self.groups {
            let cats: Vec<&String> = match self.allocation {
                Allocation::Sampled => (0..self.n_episodes).map(|_| &g.categories[categorical(&mut rng, &g.proportions)]).collect(),
                Allocation::Quota => {
                    let mut v: Vec<&String> = quota_counts(&g.proportions, self.n_episodes)
                        .into_iter()
                        .zip(&g.categories)
                        .flat_map(|(n, c)| std::iter::repeat_n(c, n))
                        .collect();
                    v.shuffle(&mut rng);
                    v
                }
            };
            for (l, c) in labels.iter_mut().zip(cats) {
                l.insert(g.attribute.clone(), c.clone());
            }
        }
        labels
    }
}

/// Index drawn from probabilities summing to 1.
fn categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum: take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Generator state of one episode.
struct Walker<'a> {
    cfg: &'a GeneratorConfig,
    risk_shift: f64,
    mean: f64,
    covariates: Vec<f64>,
}

impl<'a> Walker<'a> {
    fn new(cfg: &'a GeneratorConfig, risk_shift: f64, mean: f64) -> Self {
        Walker {
            cfg,
            risk_shift,
            mean,
            covariates: vec![0.0; cfg.n_covariates],
        }
    }

    fn advance(&mut self, t: u32, rng: &mut impl Rng) {
        let rho = self.cfg.ar_coef;
        let innovation = (1.0 - rho * rho).sqrt();
        for c in &mut self.covariates {
            let e: f64 = StandardNormal.sample(rng);
            *c = if t == 0 {
                self.mean + e
            } else {
                self.mean + rho * (*c - self.mean) + innovation * e
            };
        }
    }

    fn features(&self, t: u32, prev_reward: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.cfg.feature_dim());
        x.push(t as f64);
        x.push(prev_reward);
        x.extend(&self.covariates);
        x.push(1.0);
        x
    }

    /// Harm logit before the action effect.
    fn base_logit(&self, x: &[f64]) -> f64 {
        let quad = self.covariates.first().map_or(0.0, |c1| self.cfg.misspecification * c1 * c1);
        dot(&self.cfg.true_risk_weights, x) + self.risk_shift + quad
    }

    fn step(&self, episode_id: &str, t: u32, action: usize, reward: f64, labels: &BTreeMap<String, String>) -> TrajectoryStep {
        TrajectoryStep {
            episode_id: episode_id.to_string(),
            t,
            action: ActionId::new(action as i64).expect("action index below 9"),
            reward,
            state: self.cfg.covariate_names().into_iter().zip(self.covariates.iter().copied()).collect(),
            groups: labels.clone(),
        }
    }
}

/// Draws the configured number of episodes; deterministic given the seed.
pub fn generate(cfg: &GeneratorConfig) -> Result<EpisodeSet> {
    cfg.validate()?;
    let labels = cfg.assign_labels();
    let base = seeding::derive(cfg.seed, seeding::streams::GENERATOR);
    let episodes: Vec<Episode> = labels
        .into_par_iter()
        .enumerate()
        .map(|(i, labels)| {
            let mut rng = seeding::stream(base, i as u64);
            let id = format!("ep{i:06}");
            let mut walker = Walker::new(
                cfg,
                shift_of(&cfg.group_risk_shift, &labels),
                shift_of(&cfg.group_covariate_shift, &labels),
            );
            let mut prev = 0.0;
            let mut steps = Vec::with_capacity(cfg.horizon as usize);
            for t in 0..cfg.horizon {
                walker.advance(t, &mut rng);
                let x = walker.features(t, prev);
                let probs = softmax(&cfg.behavior_policy.iter().map(|row| dot(row, &x)).collect::<Vec<_>>());
                let a = categorical(&mut rng, &probs);
                let p_harm = sigmoid(walker.base_logit(&x) + cfg.action_harm_effect[a]);
                let reward = if rng.random::<f64>() < p_harm { cfg.harm_reward } else { 0.0 };
                steps.push(walker.step(&id, t, a, reward, &labels));
                prev = reward;
            }
            Episode { id, steps }
        })
        .collect();
    EpisodeSet::from_episodes(episodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValue {
    pub value: f64,
    /// Monte Carlo standard error; 0 for the exact solve.
    pub se: f64,
    pub method: TruthMethod,
    pub rollouts: usize,
}

/// Discounted value of `policy` in the generator's environment from the
/// episode-start distribution (categories drawn by their proportions).
///
/// Without covariates the state is `(categories, t, prev_r)` and the value is
/// solved exactly by propagating `Pr(prev_r = harm)`. Otherwise it is a Monte
/// Carlo average of `rollouts` episodes, each contributing the conditional
/// expected reward at every step.
pub fn true_values(cfg: &GeneratorConfig, policy: &LinearPolicy, gamma: f64, rollouts: usize) -> Result<TrueValue> {
    cfg.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must be in (0,1], got {gamma}")));
    }
    if cfg.n_covariates == 0 {
        return Ok(TrueValue {
            value: exact_value(cfg, policy, gamma),
            se: 0.0,
            method: TruthMethod::Exact,
            rollouts: 0,
        });
    }
    if rollouts < 2 {
        return Err(Error::InvalidArgument(
            "configuration has covariates; Monte Carlo needs at least 2 rollouts".into(),
        ));
    }
    let combos = cfg.combos();
    let combo_probs: Vec<f64> = combos.iter().map(|c| c.prob).collect();
    let base = seeding::derive(cfg.seed, seeding::streams::GENERATOR) ^ 0x7472_7565;
    let values: Vec<f64> = (0..rollouts as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::stream(base, i);
            let combo = &combos[categorical(&mut rng, &combo_probs)];
            let mut walker = Walker::new(cfg, combo.risk_shift, combo.covariate_shift);
            let mut prev = 0.0;
            let mut total = 0.0;
            let mut disc = 1.0;
            for t in 0..cfg.horizon {
                walker.advance(t, &mut rng);
                let x = walker.features(t, prev);
                let step = walker.step("", t, 0, 0.0, &combo.labels);
                let probs = policy.probs(&step, prev);
                let base_logit = walker.base_logit(&x);
                let harm: Vec<f64> = cfg.action_harm_effect.iter().map(|e| sigmoid(base_logit + e)).collect();
                total += disc * cfg.harm_reward * dot(&probs, &harm);
                disc *= gamma;
                let a = categorical(&mut rng, &probs);
                prev = if rng.random::<f64>() < harm[a] { cfg.harm_reward } else { 0.0 };
            }
            total
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(TrueValue {
        value: mean,
        se: (var / n).sqrt(),
        method: TruthMethod::MonteCarlo,
        rollouts,
    })
}

fn exact_value(cfg: &GeneratorConfig, policy: &LinearPolicy, gamma: f64) -> f64 {
    let walker_for = |c: &Combo| Walker::new(cfg, c.risk_shift, c.covariate_shift);
    cfg.combos()
        .iter()
        .map(|combo| {
            let walker = walker_for(combo);
            let mut p_harmed = 0.0;
            let mut value = 0.0;
            let mut disc = 1.0;
            for t in 0..cfg.horizon {
                let mut next_harmed = 0.0;
                for (prev, weight) in [(0.0, 1.0 - p_harmed), (cfg.harm_reward, p_harmed)] {
                    if weight == 0.0 {
                        continue;
                    }
                    let x = walker.features(t, prev);
                    let step = walker.step("", t, 0, 0.0, &combo.labels);
                    let probs = policy.probs(&step, prev);
                    let base_logit = walker.base_logit(&x);
                    let harm: f64 = probs
                        .iter()
                        .zip(&cfg.action_harm_effect)
                        .map(|(p, e)| p * sigmoid(base_logit + e))
                        .sum();
                    value += disc * weight * harm * cfg.harm_reward;
                    next_harmed += weight * harm;
                }
                p_harmed = next_harmed;
                disc *= gamma;
            }
            combo.prob * value
        })
        .sum()
}

/// Score-distribution component: the score logit is `N(mean, sd²)` with
/// mixture weight `weight`; harm probability at logit `z` is `σ(z + shift)`.
#[derive(Debug, Clone, Copy)]
struct Component {
    weight: f64,
    mean: f64,
    sd: f64,
    shift: f64,
}

const QUAD_LIMIT: f64 = 12.0;
const QUAD_INTERVALS: usize = 2400;

/// Standard normal CDF.
fn norm_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

impl Component {
    /// `Pr(logit < l)`.
    fn mass_below(&self, l: f64) -> f64 {
        self.weight * norm_cdf((l - self.mean) / self.sd)
    }

    /// `E[σ(z + shift); z < l]` by composite Simpson in standardized units.
    fn harm_below(&self, l: f64) -> f64 {
        let hi = ((l - self.mean) / self.sd).min(QUAD_LIMIT);
        if hi <= -QUAD_LIMIT {
            return 0.0;
        }
        let h = (hi + QUAD_LIMIT) / QUAD_INTERVALS as f64;
        let f = |u: f64| sigmoid(self.mean + self.shift + self.sd * u) * (-0.5 * u * u).exp();
        let mut s = f(-QUAD_LIMIT) + f(hi);
        for i in 1..QUAD_INTERVALS {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(-QUAD_LIMIT + i as f64 * h);
        }
        self.weight * s * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
    }
}

fn mass(cs: &[Component], l: f64) -> f64 {
    cs.iter().map(|c| c.mass_below(l)).sum()
}

fn harm_mass(cs: &[Component], l: f64) -> f64 {
    cs.iter().map(|c| c.harm_below(l)).sum()
}

/// Harm rate among states with score logit below `l`.
fn harm_rate(cs: &[Component], l: f64) -> f64 {
    harm_mass(cs, l) / mass(cs, l)
}

/// Root of an increasing function on `[lo, hi]` by bisection.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

const LOGIT_RANGE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGroup {
    pub coverage_tau: f64,
    /// `None` when no threshold meets the harm cap.
    pub harm_tau: Option<f64>,
    pub harm_at_harm_tau: Option<f64>,
}

/// Population thresholds for the true-weight risk score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticThresholds {
    pub alpha: f64,
    pub epsilon: f64,
    pub global_tau: f64,
    pub h_bar: f64,
    /// `attribute → category → thresholds`.
    pub groups: BTreeMap<String, BTreeMap<String, AnalyticGroup>>,
}

impl GeneratorConfig {
    /// True when the true-weight score has a Gaussian-mixture logit and harm
    /// depends on the state only through it: no `prev_r` weight, no action
    /// effects, no quadratic term, and at least one informative covariate.
    pub fn thresholds_computable(&self) -> bool {
        let w = &self.true_risk_weights;
        self.n_covariates >= 1
            && w.len() == self.feature_dim()
            && w[1] == 0.0
            && w[2..2 + self.n_covariates].iter().any(|v| *v != 0.0)
            && self.action_harm_effect.iter().all(|e| *e == 0.0)
            && self.misspecification == 0.0
    }

    fn components(&self, filter: impl Fn(&Combo) -> bool) -> Vec<Component> {
        let w = &self.true_risk_weights;
        let cov_w = &w[2..2 + self.n_covariates];
        let sd = cov_w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cov_sum: f64 = cov_w.iter().sum();
        let intercept = w[w.len() - 1];
        let per_t = 1.0 / self.horizon as f64;
        self.combos()
            .into_iter()
            .filter(|c| filter(c) && c.prob > 0.0)
            .flat_map(|c| {
                (0..self.horizon).map(move |t| Component {
                    weight: c.prob * per_t,
                    mean: intercept + w[0] * t as f64 + cov_sum * c.covariate_shift,
                    sd,
                    shift: c.risk_shift,
                })
            })
            .collect()
    }

    /// Population coverage and harm-mode thresholds, or `None` when the
    /// score distribution is not a Gaussian mixture (see
    /// [`thresholds_computable`](Self::thresholds_computable)).
    pub fn analytic_thresholds(&self, alpha: f64, epsilon: f64) -> Option<AnalyticThresholds> {
        if !self.thresholds_computable() || self.validate().is_err() {
            return None;
        }
        let all = self.components(|_| true);
        let l_glob = bisect(-LOGIT_RANGE, LOGIT_RANGE, |l| mass(&all, l) - (1.0 - alpha));
        let h_bar = harm_rate(&all, l_glob);
        let cap = h_bar + epsilon;
        let mut groups = BTreeMap::new();
        for g in &self.groups {
            let mut cats = BTreeMap::new();
            for cat in &g.categories {
                let cs = self.components(|c| c.labels.get(&g.attribute) == Some(cat));
                if cs.is_empty() {
                    continue;
                }
                let total = mass(&cs, f64::INFINITY);
                let l_cov = bisect(-LOGIT_RANGE, LOGIT_RANGE, |l| mass(&cs, l) / total - (1.0 - alpha));
                let harm_tau = if harm_rate(&cs, LOGIT_RANGE) <= cap {
                    Some(1.0)
                } else if harm_rate(&cs, -LOGIT_RANGE) > cap {
                    None
                } else {
                    Some(sigmoid(bisect(-LOGIT_RANGE, LOGIT_RANGE, |l| harm_rate(&cs, l) - cap)))
                };
                let harm_at = harm_tau.map(|t| if t >= 1.0 { harm_rate(&cs, LOGIT_RANGE) } else { cap });
                cats.insert(
                    cat.clone(),
                    AnalyticGroup {
                        coverage_tau: sigmoid(l_cov),
                        harm_tau,
                        harm_at_harm_tau: harm_at,
                    },
                );
            }
            groups.insert(g.attribute.clone(), cats);
        }
        Some(AnalyticThresholds {
            alpha,
            epsilon,
            global_tau: sigmoid(l_glob),
            h_bar,
            groups,
        })
    }

    /// Population harm rate per step when it is analytically computable.
    pub fn analytic_harm_rate(&self) -> Option<f64> {
        if !self.thresholds_computable() {
            return None;
        }
        let all = self.components(|_| true);
        Some(harm_mass(&all, f64::INFINITY))
    }
}

/// Ground truth written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub feature_names: Vec<String>,
    pub true_risk_weights: Vec<f64>,
    pub behavior_policy: Vec<Vec<f64>>,
    pub group_risk_shift: GroupMap,
    pub analytic_harm_rate: Option<f64>,
    pub analytic_thresholds: Option<AnalyticThresholds>,
    pub config: GeneratorConfig,
}

pub fn ground_truth(cfg: &GeneratorConfig, alpha: f64, epsilon: f64) -> GroundTruth {
    let mut feature_names = vec!["t".to_string(), "prev_r".to_string()];
    feature_names.extend(cfg.covariate_names());
    feature_names.push(crate::features::INTERCEPT_FEATURE.to_string());
    GroundTruth {
        feature_names,
        true_risk_weights: cfg.true_risk_weights.clone(),
        behavior_policy: cfg.behavior_policy.clone(),
        group_risk_shift: cfg.group_risk_shift.clone(),
        analytic_harm_rate: cfg.analytic_harm_rate(),
        analytic_thresholds: cfg.analytic_thresholds(alpha, epsilon),
        config: cfg.clone(),
    }
}

/// `data.jsonl` → `data.truth.json` in the same directory.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    let stem = data_path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    data_path.with_file_name(format!("{stem}.truth.json"))
}

/// Writes generated JSONL plus the ground-truth sidecar; returns the sidecar path.
pub fn write_synthetic(cfg: &GeneratorConfig, path: &Path, alpha: f64, epsilon: f64) -> Result<PathBuf> {
    let data = generate(cfg)?;
    data.save(path)?;
    let side = sidecar_path(path);
    let file = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &ground_truth(cfg, alpha, epsilon))?;
    Ok(side)
}
