//! Softmax-linear policies `π_θ(a|s) ∝ exp(θ_a·ψ(s))` over the 9 actions.
//!
//! One trainer covers behavior cloning (all steps), the FG-FARL policy (safe
//! union), Fair-BC (safe union with group weights) and the behavior model μ.
//! The last action's row is pinned to zero.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ActionId, EpisodeSet, TrajectoryStep, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec, Standardizer};
use crate::optim::{self, dot, softmax, NewtonConfig, Objective};

/// Free (non-gauge) action rows.
const FREE_ROWS: usize = NUM_ACTIONS - 1;

/// Ridge on the intercept column. Keeps logits of actions never seen in
/// training finite instead of drifting to −∞.
pub const INTERCEPT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskDescriptor {
    All,
    SafeUnion,
    SafeUnionReweighted,
    Behavior,
}

impl fmt::Display for MaskDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskDescriptor::All => "all",
            MaskDescriptor::SafeUnion => "safe-union",
            MaskDescriptor::SafeUnionReweighted => "safe-union-reweighted",
            MaskDescriptor::Behavior => "behavior",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            l2_lambda: 1.0,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Positive per-step weights with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    /// Normalizes positive finite weights to mean 1.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("sample weights"));
        }
        if let Some(bad) = raw.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!("sample weight must be positive, got {bad}")));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Ok(SampleWeights(raw.into_iter().map(|w| w / mean).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weighted mean multinomial cross-entropy plus ridge, over the free rows.
///
/// Parameters are the first 8 action rows of θ flattened row-major.
#[derive(Debug, Clone)]
pub struct SoftmaxObjective {
    pub rows: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub weights: Vec<f64>,
    pub l2_lambda: f64,
}

impl SoftmaxObjective {
    pub fn new(rows: Vec<Vec<f64>>, actions: Vec<usize>, weights: Option<&SampleWeights>, l2_lambda: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("policy training set"));
        }
        let weights = match weights {
            Some(w) if w.len() != rows.len() => {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {} training steps",
                    w.len(),
                    rows.len()
                )))
            }
            Some(w) => w.values().to_vec(),
            None => vec![1.0; rows.len()],
        };
        Ok(SoftmaxObjective {
            rows,
            actions,
            weights,
            l2_lambda,
        })
    }

    fn d(&self) -> usize {
        self.rows[0].len()
    }

    fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut z: Vec<f64> = (0..FREE_ROWS).map(|a| dot(&params[a * d..(a + 1) * d], x)).collect();
        z.push(0.0);
        z
    }

    /// Per-step cross-entropy `−ln π(a_i|s_i)`, unweighted.
    pub fn sample_losses(&self, params: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.actions)
            .map(|(x, &a)| {
                let z = self.logits(params, x);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[a]
            })
            .collect()
    }

    /// `(1/n) Σ w_i ℓ_i` without the penalty.
    pub fn data_loss(&self, params: &[f64]) -> f64 {
        let total: f64 = self
            .sample_losses(params)
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * l)
            .sum();
        total / self.rows.len() as f64
    }

    fn penalty_coef(&self, j: usize) -> f64 {
        if j % self.d() == self.d() - 1 {
            INTERCEPT_RIDGE
        } else {
            self.l2_lambda
        }
    }
}

impl Objective for SoftmaxObjective {
    fn dim(&self) -> usize {
        FREE_ROWS * self.d()
    }

    fn value(&self, params: &[f64]) -> f64 {
        let pen: f64 = params
            .iter()
            .enumerate()
            .map(|(j, v)| self.penalty_coef(j) * v * v)
            .sum();
        self.data_loss(params) + 0.5 * pen
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut g = vec![0.0; params.len()];
        for ((x, &a), w) in self.rows.iter().zip(&self.actions).zip(&self.weights) {
            let p = softmax(&self.logits(params, x));
            for b in 0..FREE_ROWS {
                let r = w * (p[b] - (a == b) as u8 as f64);
                for (gj, xj) in g[b * d..(b + 1) * d].iter_mut().zip(x) {
                    *gj += r * xj;
                }
            }
        }
        let n = self.rows.len() as f64;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = *gj / n + self.penalty_coef(j) * params[j];
        }
        g
    }

    fn hessian(&self, params: &[f64]) -> DMatrix<f64> {
        let d = self.d();
        let dim = FREE_ROWS * d;
        // Accumulate the d×d blocks for each action pair b ≤ c.
        let mut blocks = vec![DMatrix::<f64>::zeros(d, d); FREE_ROWS * FREE_ROWS];
        let mut outer = DMatrix::<f64>::zeros(d, d);
        for (x, w) in self.rows.iter().zip(&self.weights) {
            let p = softmax(&self.logits(params, x));
            for i in 0..d {
                for j in i..d {
                    outer[(i, j)] = x[i] * x[j];
                }
            }
            for b in 0..FREE_ROWS {
                for c in b..FREE_ROWS {
                    let coef = w * (if b == c { p[b] } else { 0.0 } - p[b] * p[c]);
                    let blk = &mut blocks[b * FREE_ROWS + c];
                    for i in 0..d {
                        for j in i..d {
                            blk[(i, j)] += coef * outer[(i, j)];
                        }
                    }
                }
            }
        }
        let n = self.rows.len() as f64;
        let mut h = DMatrix::zeros(dim, dim);
        for b in 0..FREE_ROWS {
            for c in b..FREE_ROWS {
                let blk = &blocks[b * FREE_ROWS + c];
                for i in 0..d {
                    for j in 0..d {
                        let v = if i <= j { blk[(i, j)] } else { blk[(j, i)] } / n;
                        h[(b * d + i, c * d + j)] = v;
                        h[(c * d + j, b * d + i)] = v;
                    }
                }
            }
        }
        for j in 0..dim {
            h[(j, j)] += self.penalty_coef(j);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    /// 9 rows (one per action) of length dim(ψ); the last row is zero.
    pub theta: Vec<Vec<f64>>,
    pub feature_spec: FeatureSpec,
    pub standardizer: Standardizer,
    pub mask: MaskDescriptor,
    pub l2_lambda: f64,
    pub converged: bool,
}

impl LinearPolicy {
    /// Policy with explicit parameters; `theta` must have 9 rows of dim(ψ).
    pub fn from_theta(theta: Vec<Vec<f64>>, map: FeatureMap, mask: MaskDescriptor) -> Result<Self> {
        if theta.len() != NUM_ACTIONS || theta.iter().any(|r| r.len() != map.dim()) {
            return Err(Error::InvalidArgument(format!(
                "theta must be {NUM_ACTIONS} x {}",
                map.dim()
            )));
        }
        Ok(LinearPolicy {
            theta,
            feature_spec: map.spec,
            standardizer: map.standardizer,
            mask,
            l2_lambda: 0.0,
            converged: true,
        })
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap {
            spec: self.feature_spec.clone(),
            standardizer: self.standardizer.clone(),
        }
    }

    /// Same parameters, different provenance label.
    pub fn relabeled(&self, mask: MaskDescriptor) -> Self {
        LinearPolicy { mask, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.feature_spec.raw_dim() + 1
    }

    /// Action probabilities for an already-encoded ψ(s).
    pub fn probs_from_features(&self, x: &[f64]) -> [f64; NUM_ACTIONS] {
        let z: Vec<f64> = self.theta.iter().map(|row| dot(row, x)).collect();
        let p = softmax(&z);
        let mut out = [0.0; NUM_ACTIONS];
        for (o, v) in out.iter_mut().zip(p) {
            // exp underflows only for logit gaps beyond ~745; keep the support full.
            *o = v.max(f64::MIN_POSITIVE);
        }
        out
    }

    pub fn probs(&self, step: &TrajectoryStep, prev_reward: f64) -> [f64; NUM_ACTIONS] {
        act_probs(self, step, prev_reward)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// `softmax(θ·ψ(s))`.
pub fn act_probs(policy: &LinearPolicy, step: &TrajectoryStep, prev_reward: f64) -> [f64; NUM_ACTIONS] {
    let x = crate::features::phi(step, prev_reward, &policy.standardizer, &policy.feature_spec);
    policy.probs_from_features(&x)
}

/// Rows, actions and the objective for the masked steps of `data`.
pub fn objective(
    data: &EpisodeSet,
    mask: Option<&[bool]>,
    map: &FeatureMap,
    weights: Option<&SampleWeights>,
    l2_lambda: f64,
) -> Result<SoftmaxObjective> {
    if let Some(m) = mask {
        if m.len() != data.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "mask has {} entries for {} steps",
                m.len(),
                data.n_steps()
            )));
        }
    }
    let (rows, actions): (Vec<_>, Vec<_>) = data
        .views()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, v)| (map.encode(v.step, v.prev_reward), v.step.action.index()))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Empty("training mask"));
    }
    SoftmaxObjective::new(rows, actions, weights, l2_lambda)
}

/// Fits a policy on the steps of `data` selected by `mask` (all when `None`).
///
/// `weights`, when given, align with the selected steps in episode-major order.
pub fn train_policy(
    data: &EpisodeSet,
    mask: Option<&[bool]>,
    map: &FeatureMap,
    weights: Option<&SampleWeights>,
    cfg: &PolicyConfig,
    descriptor: MaskDescriptor,
) -> Result<LinearPolicy> {
    if cfg.l2_lambda < 0.0 || !cfg.l2_lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "l2_lambda must be a nonnegative number, got {}",
            cfg.l2_lambda
        )));
    }
    let obj = objective(data, mask, map, weights, cfg.l2_lambda)?;
    let first = obj.actions[0];
    if obj.actions.iter().all(|&a| a == first) {
        return Err(Error::SingleAction);
    }
    let d = map.dim();
    let fit = optim::minimize(
        &obj,
        vec![0.0; FREE_ROWS * d],
        NewtonConfig {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
    )?;
    if !fit.converged {
        log::warn!("policy ({descriptor}) did not converge in {} iterations", fit.iterations);
    }
    let mut theta: Vec<Vec<f64>> = fit.x.chunks(d).map(<[f64]>::to_vec).collect();
    theta.push(vec![0.0; d]);
    Ok(LinearPolicy {
        theta,
        feature_spec: map.spec.clone(),
        standardizer: map.standardizer.clone(),
        mask: descriptor,
        l2_lambda: cfg.l2_lambda,
        converged: fit.converged,
    })
}

/// Per-group (total, safe) counts of the steps of `data`.
fn group_counts<'a>(data: &'a EpisodeSet, mask: &[bool], attribute: &str) -> BTreeMap<Option<&'a str>, (usize, usize)> {
    let mut counts: BTreeMap<Option<&str>, (usize, usize)> = BTreeMap::new();
    for (step, &safe) in data.steps().zip(mask) {
        let e = counts.entry(step.group(attribute)).or_default();
        e.0 += 1;
        e.1 += safe as usize;
    }
    counts
}

fn masked_weights(
    data: &EpisodeSet,
    mask: &[bool],
    attribute: &str,
    weight_of: impl Fn(usize, usize) -> f64,
) -> Result<SampleWeights> {
    if mask.len() != data.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "mask has {} entries for {} steps",
            mask.len(),
            data.n_steps()
        )));
    }
    if !data.catalog().contains(attribute) {
        return Err(Error::UnknownAttribute(attribute.to_string()));
    }
    let counts = group_counts(data, mask, attribute);
    let raw = data
        .steps()
        .zip(mask)
        .filter(|(_, &safe)| safe)
        .map(|(step, _)| {
            let g = step.group(attribute);
            let (total, safe) = counts[&g];
            if safe == 0 {
                return Err(Error::ZeroSafeProbability(g.unwrap_or("<missing>").to_string()));
            }
            Ok(weight_of(total, safe))
        })
        .collect::<Result<Vec<f64>>>()?;
    SampleWeights::new(raw)
}

/// Fair-BC weights for the safe steps of `data`: `w ∝ 1/P̂r(safe | group)`,
/// with the safe fraction measured on `data` itself.
pub fn fair_bc_weights(data: &EpisodeSet, safe_mask: &[bool], attribute: &str) -> Result<SampleWeights> {
    masked_weights(data, safe_mask, attribute, |total, safe| total as f64 / safe as f64)
}

/// Group-balanced weights for the safe steps: `w ∝ 1/n_g` with `n_g` the
/// number of safe steps in the group, so every group carries equal total weight.
pub fn group_balanced_weights(data: &EpisodeSet, safe_mask: &[bool], attribute: &str) -> Result<SampleWeights> {
    masked_weights(data, safe_mask, attribute, |_, safe| 1.0 / safe as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub action: u8,
    pub feature: String,
    pub coefficient: f64,
}

/// Per action, the `k` largest-magnitude non-intercept coefficients, sorted
/// by coefficient descending.
pub fn top_coefficients(policy: &LinearPolicy, k: usize) -> Result<Vec<CoefficientRow>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let names = policy.feature_spec.names();
    let mut out = Vec::new();
    for (a, row) in ActionId::all().zip(&policy.theta) {
        let mut idx: Vec<usize> = (0..names.len()).collect();
        idx.sort_by(|&i, &j| row[j].abs().total_cmp(&row[i].abs()).then(i.cmp(&j)));
        idx.truncate(k);
        idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        out.extend(idx.into_iter().map(|i| CoefficientRow {
            action: a.index() as u8,
            feature: names[i].clone(),
            coefficient: row[i],
        }));
    }
    Ok(out)
}

pub fn write_coefficients_csv(rows: &[CoefficientRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["action", "feature", "coefficient"])?;
    for r in rows {
        w.write_record([r.action.to_string(), r.feature.clone(), format!("{:.6}", r.coefficient)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
