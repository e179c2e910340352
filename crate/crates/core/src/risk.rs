//! Logistic harm-risk model `p̂(s) = σ(w·φ(s))` trained on `y = 1{r < 0}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeSet, TrajectoryStep};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec, Standardizer};
use crate::optim::{self, dot, sigmoid, softplus, NewtonConfig, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            l2_lambda: 1.0,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Mean logistic NLL plus `(λ/2)‖w‖²` over every dimension except the
/// intercept (the last one).
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub l2_lambda: f64,
}

impl LogisticObjective {
    fn n(&self) -> f64 {
        self.rows.len() as f64
    }
}

impl Objective for LogisticObjective {
    fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn value(&self, w: &[f64]) -> f64 {
        let nll: f64 = self
            .rows
            .iter()
            .zip(&self.labels)
            .map(|(x, y)| {
                let z = dot(w, x);
                softplus(z) - y * z
            })
            .sum();
        let last = w.len() - 1;
        let pen: f64 = w[..last].iter().map(|v| v * v).sum();
        nll / self.n() + 0.5 * self.l2_lambda * pen
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for (x, y) in self.rows.iter().zip(&self.labels) {
            let r = sigmoid(dot(w, x)) - y;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        let n = self.n();
        let last = w.len() - 1;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= n;
            if j < last {
                *gj += self.l2_lambda * w[j];
            }
        }
        g
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let d = w.len();
        let mut h = DMatrix::zeros(d, d);
        for x in &self.rows {
            let p = sigmoid(dot(w, x));
            let c = p * (1.0 - p);
            for i in 0..d {
                let ci = c * x[i];
                for j in i..d {
                    h[(i, j)] += ci * x[j];
                }
            }
        }
        let n = self.n();
        for i in 0..d {
            for j in i..d {
                h[(i, j)] /= n;
                h[(j, i)] = h[(i, j)];
            }
            if i + 1 < d {
                h[(i, i)] += self.l2_lambda;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub weights: Vec<f64>,
    pub l2_lambda: f64,
    pub feature_spec: FeatureSpec,
    pub standardizer: Standardizer,
    pub train_loss_trace: Vec<f64>,
    pub converged: bool,
}

impl RiskModel {
    /// A model with given weights, e.g. a known ground truth.
    pub fn from_weights(weights: Vec<f64>, map: FeatureMap) -> Result<Self> {
        if weights.len() != map.dim() {
            return Err(Error::InvalidArgument(format!(
                "weight dimension {} does not match feature dimension {}",
                weights.len(),
                map.dim()
            )));
        }
        Ok(RiskModel {
            weights,
            l2_lambda: 0.0,
            feature_spec: map.spec,
            standardizer: map.standardizer,
            train_loss_trace: Vec::new(),
            converged: true,
        })
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap {
            spec: self.feature_spec.clone(),
            standardizer: self.standardizer.clone(),
        }
    }

    pub fn score(&self, step: &TrajectoryStep, prev_reward: f64) -> f64 {
        score(self, step, prev_reward)
    }

    /// Scores for every step of `data`, in episode-major order.
    pub fn scores(&self, data: &EpisodeSet) -> Vec<f64> {
        data.views().map(|v| self.score(v.step, v.prev_reward)).collect()
    }
}

/// `σ(w·φ(s))`.
pub fn score(model: &RiskModel, step: &TrajectoryStep, prev_reward: f64) -> f64 {
    let x = crate::features::phi(step, prev_reward, &model.standardizer, &model.feature_spec);
    sigmoid(dot(&model.weights, &x))
}

/// Builds the training objective for `train` under `map`.
pub fn objective(train: &EpisodeSet, map: &FeatureMap, l2_lambda: f64) -> LogisticObjective {
    let (rows, labels) = train
        .views()
        .map(|v| {
            (
                map.encode(v.step, v.prev_reward),
                if v.step.is_harm() { 1.0 } else { 0.0 },
            )
        })
        .unzip();
    LogisticObjective {
        rows,
        labels,
        l2_lambda,
    }
}

pub fn train_risk(train: &EpisodeSet, spec: &FeatureSpec, cfg: &RiskConfig) -> Result<RiskModel> {
    if cfg.l2_lambda < 0.0 || !cfg.l2_lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "l2_lambda must be a nonnegative number, got {}",
            cfg.l2_lambda
        )));
    }
    let harms = train.steps().filter(|s| s.is_harm()).count();
    if harms == 0 || harms == train.n_steps() {
        return Err(Error::SingleClass);
    }
    let map = FeatureMap::fit(train, spec)?;
    let obj = objective(train, &map, cfg.l2_lambda);
    let fit = optim::minimize(
        &obj,
        vec![0.0; map.dim()],
        NewtonConfig {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
    )?;
    if !fit.converged {
        log::warn!(
            "risk model did not converge in {} iterations",
            fit.iterations
        );
    }
    Ok(RiskModel {
        weights: fit.x,
        l2_lambda: cfg.l2_lambda,
        feature_spec: map.spec,
        standardizer: map.standardizer,
        train_loss_trace: fit.loss_trace,
        converged: fit.converged,
    })
}
