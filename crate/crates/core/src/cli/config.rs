//! Run configuration: a flat `key = value` text file with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Command-line overrides are
//! applied as further `key = value` pairs on top of the file. Every key has
//! a default except the data source.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationConfig, ThresholdMode};
use crate::data::{EpisodeSet, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::ope::{BootstrapConfig, FqeConfig};
use crate::policy::PolicyConfig;
use crate::risk::RiskConfig;
use crate::seeding;
use crate::synthdata::GeneratorConfig;

/// Ordered key/value pairs as written.
pub type RawConfig = BTreeMap<String, String>;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `key = value` lines; duplicate keys are an error.
pub fn parse_config_text(text: &str) -> Result<RawConfig> {
    let mut out = RawConfig::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// State features to use: every feature seen in the data, or a named list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSelection {
    All,
    Named(Vec<String>),
}

impl FeatureSelection {
    fn parse(v: &str) -> Self {
        match v {
            "all" => FeatureSelection::All,
            "" => FeatureSelection::Named(Vec::new()),
            _ => FeatureSelection::Named(v.split(',').map(|s| s.trim().to_string()).collect()),
        }
    }

    fn render(&self) -> String {
        match self {
            FeatureSelection::All => "all".into(),
            FeatureSelection::Named(v) => v.join(","),
        }
    }

    fn resolve(&self, data: &EpisodeSet) -> Vec<String> {
        match self {
            FeatureSelection::Named(v) => v.clone(),
            FeatureSelection::All => data
                .steps()
                .flat_map(|s| s.state.keys())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub features: FeatureSelection,
    pub include_time: bool,
    pub include_prev_reward: bool,
    pub standardize: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            features: FeatureSelection::All,
            include_time: true,
            include_prev_reward: true,
            standardize: true,
        }
    }
}

impl FeatureOptions {
    pub fn spec(&self, data: &EpisodeSet) -> Result<FeatureSpec> {
        FeatureSpec::new(
            self.features.resolve(data),
            self.include_time,
            self.include_prev_reward,
            self.standardize,
        )
    }
}

/// How Fair-BC weights safe steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairWeighting {
    /// `w ∝ 1 / Pr(safe | group)`.
    #[default]
    SafeFraction,
    /// `w ∝ 1 / (safe steps in group)`: every group carries equal total weight.
    GroupBalanced,
}

impl FromStr for FairWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safe-fraction" => Ok(FairWeighting::SafeFraction),
            "group-balanced" => Ok(FairWeighting::GroupBalanced),
            other => Err(config_err(format!("unknown fair_bc.weighting {other}"))),
        }
    }
}

impl FairWeighting {
    fn name(self) -> &'static str {
        match self {
            FairWeighting::SafeFraction => "safe-fraction",
            FairWeighting::GroupBalanced => "group-balanced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    File(PathBuf),
    Generator(Box<GeneratorConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub split_mode: SplitMode,
    pub split_fractions: [f64; 3],
    pub risk_features: FeatureOptions,
    pub risk: RiskConfig,
    pub policy_features: FeatureOptions,
    pub policy: PolicyConfig,
    /// Also train policies on calibration steps.
    pub policy_include_calib: bool,
    pub fair_bc_weighting: FairWeighting,
    /// Protected attribute; `None` picks the only attribute in the data.
    pub attribute: Option<String>,
    pub mode: ThresholdMode,
    pub calibration: CalibrationConfig,
    pub fqe: FqeConfig,
    pub rho_max: f64,
    pub bootstrap: BootstrapConfig,
    pub reward_norm: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub run_label: String,
    pub write_timings: bool,
    pub top_k: usize,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// Generator keys, resolved after the master seed is known.
#[derive(Default)]
struct SynthKeys {
    preset: Option<String>,
    json_path: Option<PathBuf>,
    inline: Option<String>,
    n_episodes: Option<usize>,
    horizon: Option<u32>,
    seed: Option<u64>,
    harm_reward: Option<f64>,
    misspecification: Option<f64>,
}

impl SynthKeys {
    fn any(&self) -> bool {
        self.preset.is_some() || self.json_path.is_some() || self.inline.is_some()
    }

    fn build(&self, master_seed: u64) -> Result<Option<GeneratorConfig>> {
        if !self.any() {
            if self.n_episodes.is_some() || self.horizon.is_some() || self.seed.is_some() {
                return Err(config_err("synth.* overrides need synth.preset, synth.config_json or synth.config_inline"));
            }
            return Ok(None);
        }
        let seed = self
            .seed
            .unwrap_or_else(|| seeding::derive(master_seed, seeding::streams::GENERATOR));
        let mut cfg = match (&self.preset, &self.json_path, &self.inline) {
            (Some(p), None, None) => GeneratorConfig::preset(p, seed)?,
            (None, Some(path), None) => {
                let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
            }
            (None, None, Some(text)) => {
                serde_json::from_str(text).map_err(|e| config_err(format!("synth.config_inline: {e}")))?
            }
            _ => return Err(config_err("set only one of synth.preset, synth.config_json, synth.config_inline")),
        };
        if self.seed.is_some() || self.preset.is_some() {
            cfg.seed = seed;
        }
        if let Some(n) = self.n_episodes {
            cfg.n_episodes = n;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(r) = self.harm_reward {
            cfg.harm_reward = r;
        }
        if let Some(m) = self.misspecification {
            cfg.misspecification = m;
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }
}

impl RunConfig {
    /// Defaults around a given data source.
    pub fn with_data(data: DataSource) -> Self {
        RunConfig {
            data,
            split_mode: SplitMode::ByEpisode,
            split_fractions: [0.6, 0.2, 0.2],
            risk_features: FeatureOptions::default(),
            risk: RiskConfig::default(),
            policy_features: FeatureOptions::default(),
            policy: PolicyConfig::default(),
            policy_include_calib: false,
            fair_bc_weighting: FairWeighting::SafeFraction,
            attribute: None,
            mode: ThresholdMode::Harm,
            calibration: CalibrationConfig::default(),
            fqe: FqeConfig::default(),
            rho_max: 10.0,
            bootstrap: BootstrapConfig::default(),
            reward_norm: false,
            seed: 0,
            out_dir: PathBuf::from("out"),
            run_label: "run".into(),
            write_timings: true,
            top_k: 5,
        }
    }

    /// Builds a validated configuration from raw pairs (file, then overrides).
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut cfg = Self::with_data(DataSource::File(PathBuf::new()));
        let mut data_path = None;
        let mut synth = SynthKeys::default();
        for (key, v) in raw {
            let k = key.as_str();
            match k {
                "data.path" => data_path = Some(PathBuf::from(v)),
                "synth.preset" => synth.preset = Some(v.clone()),
                "synth.config_json" => synth.json_path = Some(PathBuf::from(v)),
                "synth.config_inline" => synth.inline = Some(v.clone()),
                "synth.n_episodes" => synth.n_episodes = Some(parse(k, v)?),
                "synth.horizon" => synth.horizon = Some(parse(k, v)?),
                "synth.seed" => synth.seed = Some(parse(k, v)?),
                "synth.harm_reward" => synth.harm_reward = Some(parse(k, v)?),
                "synth.misspecification" => synth.misspecification = Some(parse(k, v)?),
                "split.mode" => cfg.split_mode = v.parse().map_err(|e: Error| config_err(e.to_string()))?,
                "split.train" => cfg.split_fractions[0] = parse(k, v)?,
                "split.calib" => cfg.split_fractions[1] = parse(k, v)?,
                "split.test" => cfg.split_fractions[2] = parse(k, v)?,
                "risk.features" => cfg.risk_features.features = FeatureSelection::parse(v),
                "risk.include_time" => cfg.risk_features.include_time = parse_bool(k, v)?,
                "risk.include_prev_reward" => cfg.risk_features.include_prev_reward = parse_bool(k, v)?,
                "risk.standardize" => cfg.risk_features.standardize = parse_bool(k, v)?,
                "risk.lambda" => cfg.risk.l2_lambda = parse(k, v)?,
                "risk.tol" => cfg.risk.tol = parse(k, v)?,
                "risk.max_iter" => cfg.risk.max_iter = parse(k, v)?,
                "policy.features" => cfg.policy_features.features = FeatureSelection::parse(v),
                "policy.include_time" => cfg.policy_features.include_time = parse_bool(k, v)?,
                "policy.include_prev_reward" => cfg.policy_features.include_prev_reward = parse_bool(k, v)?,
                "policy.standardize" => cfg.policy_features.standardize = parse_bool(k, v)?,
                "policy.lambda" => cfg.policy.l2_lambda = parse(k, v)?,
                "policy.tol" => cfg.policy.tol = parse(k, v)?,
                "policy.max_iter" => cfg.policy.max_iter = parse(k, v)?,
                "policy.include_calib" => cfg.policy_include_calib = parse_bool(k, v)?,
                "fair_bc.weighting" => cfg.fair_bc_weighting = v.parse()?,
                "calibrate.attribute" => cfg.attribute = Some(v.clone()),
                "calibrate.mode" => cfg.mode = v.parse().map_err(|e: Error| config_err(e.to_string()))?,
                "calibrate.alpha" => cfg.calibration.alpha = parse(k, v)?,
                "calibrate.epsilon" => cfg.calibration.epsilon = parse(k, v)?,
                "calibrate.min_group_n" => cfg.calibration.min_group_n = parse(k, v)?,
                "ope.gamma" => cfg.fqe.gamma = parse(k, v)?,
                "ope.fqe_iterations" => cfg.fqe.iterations = parse(k, v)?,
                "ope.ridge" => cfg.fqe.ridge = parse(k, v)?,
                "ope.rho_max" => cfg.rho_max = parse(k, v)?,
                "ope.bootstrap_replicates" => cfg.bootstrap.replicates = parse(k, v)?,
                "ope.bootstrap_level" => cfg.bootstrap.level = parse(k, v)?,
                "reward_norm" => cfg.reward_norm = parse_bool(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "run_label" => cfg.run_label = v.clone(),
                "report.timings" => cfg.write_timings = parse_bool(k, v)?,
                "report.top_k" => cfg.top_k = parse(k, v)?,
                other => return Err(config_err(format!("unknown key {other}"))),
            }
        }
        cfg.data = match (data_path, synth.build(cfg.seed)?) {
            (Some(p), None) => DataSource::File(p),
            (None, Some(g)) => DataSource::Generator(Box::new(g)),
            (Some(_), Some(_)) => return Err(config_err("set either data.path or a synth.* source, not both")),
            (None, None) => return Err(config_err("no data source: set data.path or synth.preset")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.calibration.validate().map_err(|e| config_err(e.to_string()))?;
        self.split_spec().validate().map_err(|e| config_err(e.to_string()))?;
        let checks: [(bool, &str); 10] = [
            (self.fqe.gamma > 0.0 && self.fqe.gamma < 1.0, "ope.gamma must be in (0,1)"),
            (self.fqe.iterations >= 1, "ope.fqe_iterations must be >= 1"),
            (self.fqe.ridge >= 0.0, "ope.ridge must be >= 0"),
            (self.rho_max > 0.0, "ope.rho_max must be > 0"),
            (self.bootstrap.replicates >= 100, "ope.bootstrap_replicates must be >= 100"),
            (self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0, "ope.bootstrap_level must be in (0,1)"),
            (self.risk.l2_lambda >= 0.0 && self.policy.l2_lambda >= 0.0, "lambda must be >= 0"),
            (self.top_k >= 1, "report.top_k must be >= 1"),
            (!self.run_label.is_empty() && !self.run_label.contains(['/', '\\']), "run_label must be a plain name"),
            (self.risk.max_iter >= 1 && self.policy.max_iter >= 1, "max_iter must be >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(config_err(*msg)),
            None => Ok(()),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.split_mode,
            fractions: self.split_fractions,
            seed: seeding::derive(self.seed, seeding::streams::SPLIT),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_label)
    }

    /// Fills data-dependent choices (attribute, "all" feature lists).
    pub fn resolve(&mut self, data: &EpisodeSet) -> Result<()> {
        if self.attribute.is_none() {
            let attrs: Vec<&str> = data.catalog().attributes().collect();
            match attrs.as_slice() {
                [only] => self.attribute = Some(only.to_string()),
                _ => {
                    return Err(config_err(format!(
                        "calibrate.attribute not set and the data has {} attributes",
                        attrs.len()
                    )))
                }
            }
        }
        for opts in [&mut self.risk_features, &mut self.policy_features] {
            opts.features = FeatureSelection::Named(opts.features.resolve(data));
        }
        Ok(())
    }

    pub fn attribute(&self) -> Result<&str> {
        self.attribute
            .as_deref()
            .ok_or_else(|| config_err("calibrate.attribute is not resolved"))
    }

    /// The configuration as `key = value` lines that parse back to `self`.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        match &self.data {
            DataSource::File(p) => put("data.path", p.display().to_string()),
            DataSource::Generator(g) => put(
                "synth.config_inline",
                serde_json::to_string(g).expect("generator config serializes"),
            ),
        }
        put("split.mode", self.split_mode.to_string());
        put("split.train", self.split_fractions[0].to_string());
        put("split.calib", self.split_fractions[1].to_string());
        put("split.test", self.split_fractions[2].to_string());
        for (prefix, f) in [("risk", &self.risk_features), ("policy", &self.policy_features)] {
            put(&format!("{prefix}.features"), f.features.render());
            put(&format!("{prefix}.include_time"), f.include_time.to_string());
            put(&format!("{prefix}.include_prev_reward"), f.include_prev_reward.to_string());
            put(&format!("{prefix}.standardize"), f.standardize.to_string());
        }
        put("risk.lambda", self.risk.l2_lambda.to_string());
        put("risk.tol", self.risk.tol.to_string());
        put("risk.max_iter", self.risk.max_iter.to_string());
        put("policy.lambda", self.policy.l2_lambda.to_string());
        put("policy.tol", self.policy.tol.to_string());
        put("policy.max_iter", self.policy.max_iter.to_string());
        put("policy.include_calib", self.policy_include_calib.to_string());
        put("fair_bc.weighting", self.fair_bc_weighting.name().to_string());
        if let Some(a) = &self.attribute {
            put("calibrate.attribute", a.clone());
        }
        put("calibrate.mode", self.mode.to_string());
        put("calibrate.alpha", self.calibration.alpha.to_string());
        put("calibrate.epsilon", self.calibration.epsilon.to_string());
        put("calibrate.min_group_n", self.calibration.min_group_n.to_string());
        put("ope.gamma", self.fqe.gamma.to_string());
        put("ope.fqe_iterations", self.fqe.iterations.to_string());
        put("ope.ridge", self.fqe.ridge.to_string());
        put("ope.rho_max", self.rho_max.to_string());
        put("ope.bootstrap_replicates", self.bootstrap.replicates.to_string());
        put("ope.bootstrap_level", self.bootstrap.level.to_string());
        put("reward_norm", self.reward_norm.to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("run_label", self.run_label.clone());
        put("report.timings", self.write_timings.to_string());
        put("report.top_k", self.top_k.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
