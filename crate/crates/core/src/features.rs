//! Feature maps for the risk model, the policies and FQE.
//!
//! Layout of a state vector: `[t?, prev_r?, selected state features..., 1]`.
//! Missing state features are imputed with the train-split mean, then every
//! non-intercept dimension is optionally standardized with train-split
//! statistics. The trailing intercept is never standardized.

use serde::{Deserialize, Serialize};

use crate::data::{ActionId, EpisodeSet, TrajectoryStep, NUM_ACTIONS};
use crate::error::{Error, Result};

pub const TIME_FEATURE: &str = "t";
pub const PREV_REWARD_FEATURE: &str = "prev_r";
pub const INTERCEPT_FEATURE: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub state_features: Vec<String>,
    pub include_time: bool,
    pub include_prev_reward: bool,
    pub standardize: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            state_features: Vec::new(),
            include_time: true,
            include_prev_reward: true,
            standardize: true,
        }
    }
}

impl FeatureSpec {
    pub fn new(
        state_features: Vec<String>,
        include_time: bool,
        include_prev_reward: bool,
        standardize: bool,
    ) -> Result<Self> {
        let spec = FeatureSpec {
            state_features,
            include_time,
            include_prev_reward,
            standardize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, name) in self.state_features.iter().enumerate() {
            if self.state_features[..i].contains(name) {
                return Err(Error::InvalidFeatureSpec(format!("duplicate feature {name}")));
            }
        }
        Ok(())
    }

    /// Number of dimensions before the intercept.
    pub fn raw_dim(&self) -> usize {
        self.include_time as usize + self.include_prev_reward as usize + self.state_features.len()
    }

    /// Names of the non-intercept dimensions, in layout order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.raw_dim());
        if self.include_time {
            names.push(TIME_FEATURE.to_string());
        }
        if self.include_prev_reward {
            names.push(PREV_REWARD_FEATURE.to_string());
        }
        names.extend(self.state_features.iter().cloned());
        names
    }

    /// Raw values before imputation; `None` marks a missing state feature.
    fn raw<'a>(
        &'a self,
        step: &'a TrajectoryStep,
        prev_reward: f64,
    ) -> impl Iterator<Item = Option<f64>> + 'a {
        let time = self.include_time.then_some(Some(step.t as f64));
        let prev = self.include_prev_reward.then_some(Some(prev_reward));
        time.into_iter()
            .chain(prev)
            .chain(self.state_features.iter().map(move |f| step.state.get(f).copied()))
    }
}

/// Per-dimension train statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub impute: Vec<f64>,
}

/// Fits imputation and scaling statistics on the train split.
///
/// Population standard deviation; zero-variance dimensions get scale 1.
pub fn fit_standardizer(train: &EpisodeSet, spec: &FeatureSpec) -> Result<Standardizer> {
    spec.validate()?;
    if train.n_steps() == 0 {
        return Err(Error::Empty("train split"));
    }
    let dim = spec.raw_dim();
    let mut sum = vec![0.0; dim];
    let mut count = vec![0usize; dim];
    for v in train.views() {
        for (d, x) in spec.raw(v.step, v.prev_reward).enumerate() {
            if let Some(x) = x {
                sum[d] += x;
                count[d] += 1;
            }
        }
    }
    let names = spec.names();
    if let Some(d) = (0..dim).find(|&d| count[d] == 0) {
        return Err(Error::MissingFeature(names[d].clone()));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![0.0; dim];
    for v in train.views() {
        for (d, x) in spec.raw(v.step, v.prev_reward).enumerate() {
            if let Some(x) = x {
                sq[d] += (x - mean[d]).powi(2);
            }
        }
    }
    let scale = sq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((s, &c), m)| {
            let var = s / c as f64;
            if var > 1e-24 * m.abs().max(1.0).powi(2) {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    Ok(Standardizer {
        impute: mean.clone(),
        mean,
        scale,
    })
}

/// φ(s): imputed, optionally standardized features with a trailing intercept.
pub fn phi(step: &TrajectoryStep, prev_reward: f64, std: &Standardizer, spec: &FeatureSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.raw_dim() + 1);
    for (d, x) in spec.raw(step, prev_reward).enumerate() {
        let x = x.unwrap_or(std.impute[d]);
        out.push(if spec.standardize {
            (x - std.mean[d]) / std.scale[d]
        } else {
            x
        });
    }
    out.push(1.0);
    out
}

/// φ(s, a) = [ψ(s), onehot(a)].
pub fn phi_sa(
    step: &TrajectoryStep,
    prev_reward: f64,
    std: &Standardizer,
    spec: &FeatureSpec,
    action: ActionId,
) -> Vec<f64> {
    let mut out = phi(step, prev_reward, std, spec);
    let base = out.len();
    out.resize(base + NUM_ACTIONS, 0.0);
    out[base + action.index()] = 1.0;
    out
}

/// A feature spec bundled with its fitted statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub spec: FeatureSpec,
    pub standardizer: Standardizer,
}

impl FeatureMap {
    pub fn fit(train: &EpisodeSet, spec: &FeatureSpec) -> Result<Self> {
        Ok(FeatureMap {
            standardizer: fit_standardizer(train, spec)?,
            spec: spec.clone(),
        })
    }

    /// Identity statistics: no scaling, missing features imputed as 0.
    pub fn raw(spec: FeatureSpec) -> Self {
        let dim = spec.raw_dim();
        FeatureMap {
            spec: FeatureSpec {
                standardize: false,
                ..spec
            },
            standardizer: Standardizer {
                mean: vec![0.0; dim],
                scale: vec![1.0; dim],
                impute: vec![0.0; dim],
            },
        }
    }

    /// Length of φ(s) including the intercept.
    pub fn dim(&self) -> usize {
        self.spec.raw_dim() + 1
    }

    pub fn encode(&self, step: &TrajectoryStep, prev_reward: f64) -> Vec<f64> {
        phi(step, prev_reward, &self.standardizer, &self.spec)
    }

    pub fn encode_sa(&self, step: &TrajectoryStep, prev_reward: f64, action: ActionId) -> Vec<f64> {
        phi_sa(step, prev_reward, &self.standardizer, &self.spec, action)
    }
}

/// Checked variant of [`phi_sa`] for untyped action indices.
pub fn phi_sa_checked(
    step: &TrajectoryStep,
    prev_reward: f64,
    map: &FeatureMap,
    action: i64,
) -> Result<Vec<f64>> {
    let action = ActionId::new(action)
        .ok_or_else(|| Error::InvalidArgument(format!("action out of range: {action}")))?;
    Ok(map.encode_sa(step, prev_reward, action))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Episode;
    use std::collections::BTreeMap;

    fn step(t: u32, x: Option<f64>, reward: f64) -> TrajectoryStep {
        TrajectoryStep {
            episode_id: "e".into(),
            t,
            action: ActionId::new(0).unwrap(),
            reward,
            state: x.map(|x| ("x".to_string(), x)).into_iter().collect(),
            groups: BTreeMap::new(),
        }
    }

    fn set(steps: Vec<TrajectoryStep>) -> EpisodeSet {
        EpisodeSet::from_episodes(vec![Episode {
            id: "e".into(),
            steps,
        }])
        .unwrap()
    }

    fn x_only() -> FeatureSpec {
        FeatureSpec::new(vec!["x".into()], false, false, true).unwrap()
    }

    #[test]
    fn constant_column_gets_unit_scale() {
        let data = set((0..4).map(|t| step(t, Some(5.0), 0.0)).collect());
        let s = fit_standardizer(&data, &x_only()).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.scale, vec![1.0]);
    }

    #[test]
    fn population_std() {
        let data = set((0..4).map(|t| step(t, Some(if t % 2 == 0 { 0.0 } else { 2.0 }), 0.0)).collect());
        let s = fit_standardizer(&data, &x_only()).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.scale, vec![1.0]);
    }

    #[test]
    fn missing_values_excluded_and_imputed() {
        let data = set(vec![step(0, Some(1.0), 0.0), step(1, None, 0.0), step(2, Some(3.0), 0.0)]);
        let spec = x_only();
        let s = fit_standardizer(&data, &spec).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.impute, vec![2.0]);
        assert_eq!(phi(&step(5, None, 0.0), 0.0, &s, &spec), vec![0.0, 1.0]);
    }

    #[test]
    fn absent_feature_is_an_error() {
        let data = set(vec![step(0, None, 0.0)]);
        let err = fit_standardizer(&data, &x_only()).unwrap_err();
        assert!(matches!(err, Error::MissingFeature(ref f) if f == "x"));
    }

    #[test]
    fn duplicate_features_rejected() {
        assert!(FeatureSpec::new(vec!["a".into(), "a".into()], true, true, true).is_err());
    }

    #[test]
    fn bare_time_and_prev_reward() {
        let spec = FeatureSpec::new(vec![], true, true, false).unwrap();
        let data = set(vec![step(0, None, -1.0), step(1, None, 0.0)]);
        let map = FeatureMap::fit(&data, &spec).unwrap();
        let first = data.views().next().unwrap();
        assert_eq!(map.encode(first.step, first.prev_reward), vec![0.0, 0.0, 1.0]);
        let second = data.views().nth(1).unwrap();
        assert_eq!(map.encode(second.step, second.prev_reward), vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn one_hot_block() {
        let spec = FeatureSpec::new(vec!["x".into()], true, false, false).unwrap();
        let data = set(vec![step(0, Some(1.0), 0.0)]);
        let map = FeatureMap::fit(&data, &spec).unwrap();
        assert_eq!(map.dim(), 3);
        for a in ActionId::all() {
            let v = map.encode_sa(&data.episodes()[0].steps[0], 0.0, a);
            assert_eq!(v.len(), 12);
            assert_eq!(v[3..].iter().sum::<f64>(), 1.0);
            assert_eq!(v[3 + a.index()], 1.0);
        }
        assert!(phi_sa_checked(&data.episodes()[0].steps[0], 0.0, &map, 9).is_err());
    }

    #[test]
    fn standardized_train_dims_have_zero_mean_unit_std() {
        let steps: Vec<_> = (0..50)
            .map(|t| step(t, Some(((t * 7919) % 13) as f64 * 0.37 - 1.0), if t % 5 == 0 { -1.0 } else { 0.0 }))
            .collect();
        let data = set(steps);
        let spec = FeatureSpec::new(vec!["x".into()], true, true, true).unwrap();
        let map = FeatureMap::fit(&data, &spec).unwrap();
        let rows: Vec<Vec<f64>> = data.views().map(|v| map.encode(v.step, v.prev_reward)).collect();
        for d in 0..3 {
            let n = rows.len() as f64;
            let m = rows.iter().map(|r| r[d]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-9, "dim {d} mean {m}");
            assert!((sd - 1.0).abs() < 1e-9, "dim {d} sd {sd}");
        }
        assert!(rows.iter().all(|r| r[3] == 1.0));
    }
}
