//! Offline trajectory datasets: JSONL ingest, validation, splitting and
//! group slicing.
//!
//! A dataset is an ordered list of episodes; each episode is an ordered list
//! of steps with strictly increasing time index. Group attributes (age bin,
//! sex, race group, ...) travel with every step and are expected to be
//! constant within an episode. The harm label of a step is derived from its
//! reward (`reward < 0`) and never stored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Size of the discrete action set.
pub const NUM_ACTIONS: usize = 9;

/// A discrete action in `0..NUM_ACTIONS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct ActionId(u8);

impl ActionId {
    pub fn new(action: i64) -> Option<Self> {
        (0..NUM_ACTIONS as i64)
            .contains(&action)
            .then_some(ActionId(action as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = ActionId> {
        (0..NUM_ACTIONS as u8).map(ActionId)
    }
}

impl TryFrom<i64> for ActionId {
    type Error = String;

    fn try_from(value: i64) -> std::result::Result<Self, Self::Error> {
        ActionId::new(value).ok_or_else(|| format!("action out of range: {value}"))
    }
}

impl From<ActionId> for i64 {
    fn from(a: ActionId) -> i64 {
        a.0 as i64
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One logged decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub episode_id: String,
    pub t: u32,
    #[serde(rename = "action_id")]
    pub action: ActionId,
    pub reward: f64,
    pub state: BTreeMap<String, f64>,
    pub groups: BTreeMap<String, String>,
}

impl TrajectoryStep {
    /// Adverse-event label: `reward < 0`.
    pub fn is_harm(&self) -> bool {
        self.reward < 0.0
    }

    pub fn group(&self, attribute: &str) -> Option<&str> {
        self.groups.get(attribute).map(String::as_str)
    }
}

/// Wire form of a step record; unknown keys are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    episode_id: String,
    t: u32,
    action_id: i64,
    reward: f64,
    state: BTreeMap<String, f64>,
    groups: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub steps: Vec<TrajectoryStep>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Reward of the preceding step, 0 for the first step.
    pub fn prev_reward(&self, index: usize) -> f64 {
        if index == 0 {
            0.0
        } else {
            self.steps[index - 1].reward
        }
    }

    /// Undiscounted sum of observed rewards.
    pub fn episodic_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Group label of the episode, or an error if it varies across steps.
    pub fn constant_group(&self, attribute: &str) -> Result<Option<&str>> {
        let first = self.steps.first().and_then(|s| s.group(attribute));
        if self.steps.iter().any(|s| s.group(attribute) != first) {
            return Err(Error::AttributeVaries {
                attribute: attribute.to_string(),
                episode_id: self.id.clone(),
            });
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub steps: usize,
    pub episodes: usize,
}

/// Attribute name → category label → counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCatalog(pub BTreeMap<String, BTreeMap<String, CategoryCount>>);

impl AttributeCatalog {
    fn from_episodes(episodes: &[Episode]) -> Self {
        let mut catalog: BTreeMap<String, BTreeMap<String, CategoryCount>> = BTreeMap::new();
        for ep in episodes {
            let mut seen: BTreeMap<(&str, &str), ()> = BTreeMap::new();
            for step in &ep.steps {
                for (attr, cat) in &step.groups {
                    let entry = catalog
                        .entry(attr.clone())
                        .or_default()
                        .entry(cat.clone())
                        .or_default();
                    entry.steps += 1;
                    if seen.insert((attr, cat), ()).is_none() {
                        entry.episodes += 1;
                    }
                }
            }
        }
        AttributeCatalog(catalog)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn contains(&self, attribute: &str) -> bool {
        self.0.contains_key(attribute)
    }

    pub fn categories(&self, attribute: &str) -> Result<&BTreeMap<String, CategoryCount>> {
        self.0
            .get(attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }
}

/// Borrowed view of a step with its within-episode context.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub step: &'a TrajectoryStep,
    pub prev_reward: f64,
    /// Successor in the same episode, `None` at the terminal step.
    pub next: Option<(&'a TrajectoryStep, f64)>,
    pub episode: usize,
    pub index_in_episode: usize,
}

/// An immutable, validated collection of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSet {
    episodes: Vec<Episode>,
    catalog: AttributeCatalog,
}

impl EpisodeSet {
    /// Builds a set from episodes, validating ordering and group-key consistency.
    ///
    /// Time indices must be strictly increasing; they need not start at 0
    /// (fragments produced by index splits do not). Empty episodes are dropped.
    pub fn from_episodes(episodes: Vec<Episode>) -> Result<Self> {
        let episodes: Vec<Episode> = episodes.into_iter().filter(|e| !e.is_empty()).collect();
        for ep in &episodes {
            for pair in ep.steps.windows(2) {
                if pair[1].t <= pair[0].t {
                    return Err(Error::InvalidEpisode {
                        episode_id: ep.id.clone(),
                        message: format!(
                            "time index not strictly increasing ({} then {})",
                            pair[0].t, pair[1].t
                        ),
                    });
                }
            }
            let keys: Vec<&String> = ep.steps[0].groups.keys().collect();
            if ep
                .steps
                .iter()
                .any(|s| !s.groups.keys().eq(keys.iter().copied()))
            {
                return Err(Error::InconsistentGroupKeys {
                    episode_id: ep.id.clone(),
                });
            }
        }
        let catalog = AttributeCatalog::from_episodes(&episodes);
        Ok(EpisodeSet { episodes, catalog })
    }

    pub fn empty() -> Self {
        EpisodeSet {
            episodes: Vec::new(),
            catalog: AttributeCatalog::default(),
        }
    }

    /// Groups loose step records into episodes (first-appearance order) and
    /// enforces the full ingest invariants, including `t` starting at 0.
    pub fn from_steps(steps: Vec<TrajectoryStep>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, Vec<TrajectoryStep>> = HashMap::new();
        for step in steps {
            by_id
                .entry(step.episode_id.clone())
                .or_insert_with(|| {
                    order.push(step.episode_id.clone());
                    Vec::new()
                })
                .push(step);
        }
        let mut episodes = Vec::with_capacity(order.len());
        for id in order {
            let mut steps = by_id.remove(&id).unwrap_or_default();
            steps.sort_by_key(|s| s.t);
            if let Some(pair) = steps.windows(2).find(|p| p[0].t == p[1].t) {
                return Err(Error::DuplicateStep {
                    episode_id: id,
                    t: pair[0].t,
                });
            }
            if steps[0].t != 0 {
                return Err(Error::InvalidEpisode {
                    episode_id: id,
                    message: format!("first time index is {}, expected 0", steps[0].t),
                });
            }
            episodes.push(Episode { id, steps });
        }
        Self::from_episodes(episodes)
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn catalog(&self) -> &AttributeCatalog {
        &self.catalog
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = &TrajectoryStep> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    /// Steps in episode-major order with previous reward and successor.
    pub fn views(&self) -> impl Iterator<Item = StepView<'_>> {
        self.episodes.iter().enumerate().flat_map(|(ei, ep)| {
            ep.steps.iter().enumerate().map(move |(i, step)| StepView {
                step,
                prev_reward: ep.prev_reward(i),
                next: ep.steps.get(i + 1).map(|n| (n, step.reward)),
                episode: ei,
                index_in_episode: i,
            })
        })
    }

    /// Concatenation of several sets (episode order preserved).
    pub fn concat(sets: &[&EpisodeSet]) -> Result<Self> {
        let episodes = sets
            .iter()
            .flat_map(|s| s.episodes.iter().cloned())
            .collect();
        Self::from_episodes(episodes)
    }

    /// Applies `f` to every reward, keeping structure.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Self {
        let episodes = self
            .episodes
            .iter()
            .map(|ep| Episode {
                id: ep.id.clone(),
                steps: ep
                    .steps
                    .iter()
                    .map(|s| TrajectoryStep {
                        reward: f(s.reward),
                        ..s.clone()
                    })
                    .collect(),
            })
            .collect();
        EpisodeSet {
            episodes,
            catalog: self.catalog.clone(),
        }
    }

    /// Steps whose `groups[attribute] == category`, episode structure kept.
    ///
    /// An unknown category yields an empty set.
    pub fn group_slice(&self, attribute: &str, category: &str) -> Result<Self> {
        if !self.catalog.contains(attribute) {
            return Err(Error::UnknownAttribute(attribute.to_string()));
        }
        let episodes = self
            .episodes
            .iter()
            .map(|ep| Episode {
                id: ep.id.clone(),
                steps: ep
                    .steps
                    .iter()
                    .filter(|s| s.group(attribute) == Some(category))
                    .cloned()
                    .collect(),
            })
            .collect();
        Self::from_episodes(episodes)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for step in self.steps() {
            serde_json::to_writer(&mut writer, step)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses JSONL step records (blank lines ignored).
pub fn read_jsonl(reader: impl BufRead) -> Result<EpisodeSet> {
    let mut steps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let action = ActionId::new(rec.action_id).ok_or(Error::ActionOutOfRange {
            line: line_no,
            action: rec.action_id,
        })?;
        steps.push(TrajectoryStep {
            episode_id: rec.episode_id,
            t: rec.t,
            action,
            reward: rec.reward,
            state: rec.state,
            groups: rec.groups,
        });
    }
    EpisodeSet::from_steps(steps)
}

/// Loads a JSONL dataset from disk.
pub fn load_dataset(path: &Path) -> Result<EpisodeSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    #[default]
    ByEpisode,
    ByIndex,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::ByEpisode => "by-episode",
            SplitMode::ByIndex => "by-index",
        })
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by-episode" => Ok(SplitMode::ByEpisode),
            "by-index" => Ok(SplitMode::ByIndex),
            other => Err(Error::InvalidSplit(format!("unknown split mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// (train, calibration, test)
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            mode,
            fractions,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidSplit(format!(
                "fractions must be positive: {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSplit(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Sizes for `n` units: train and calibration rounded, test takes the rest.
    fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let train = ((self.fractions[0] * n as f64).round() as usize).min(n);
        let calib = ((self.fractions[1] * n as f64).round() as usize).min(n - train);
        let test = n - train - calib;
        for (size, name) in [(train, "train"), (calib, "calibration"), (test, "test")] {
            if size == 0 {
                return Err(Error::EmptySplit { split: name });
            }
        }
        Ok([train, calib, test])
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::ByEpisode,
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: EpisodeSet,
    pub calib: EpisodeSet,
    pub test: EpisodeSet,
}

/// Partitions `data` into train / calibration / test.
///
/// By-episode mode shuffles whole episodes with the split seed, and each
/// split keeps the original relative episode order. By-index mode cuts the
/// global step sequence into contiguous blocks, so at most two episodes are
/// broken into fragments.
pub fn split(data: &EpisodeSet, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    match spec.mode {
        SplitMode::ByEpisode => {
            let n = data.n_episodes();
            let [n_train, n_calib, _] = spec.sizes(n)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeding::rng(spec.seed));
            let mut assign = vec![0u8; n];
            for (rank, &ep) in order.iter().enumerate() {
                assign[ep] = if rank < n_train {
                    0
                } else if rank < n_train + n_calib {
                    1
                } else {
                    2
                };
            }
            let pick = |which: u8| {
                EpisodeSet::from_episodes(
                    data.episodes
                        .iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == which)
                        .map(|(e, _)| e.clone())
                        .collect(),
                )
            };
            Ok(Splits {
                train: pick(0)?,
                calib: pick(1)?,
                test: pick(2)?,
            })
        }
        SplitMode::ByIndex => {
            let n = data.n_steps();
            let [n_train, n_calib, _] = spec.sizes(n)?;
            let mut parts: [Vec<Episode>; 3] = Default::default();
            let mut global = 0usize;
            for ep in &data.episodes {
                let mut pieces: [Vec<TrajectoryStep>; 3] = Default::default();
                for step in &ep.steps {
                    let which = if global < n_train {
                        0
                    } else if global < n_train + n_calib {
                        1
                    } else {
                        2
                    };
                    pieces[which].push(step.clone());
                    global += 1;
                }
                for (part, steps) in parts.iter_mut().zip(pieces) {
                    if !steps.is_empty() {
                        part.push(Episode {
                            id: ep.id.clone(),
                            steps,
                        });
                    }
                }
            }
            let [train, calib, test] = parts;
            Ok(Splits {
                train: EpisodeSet::from_episodes(train)?,
                calib: EpisodeSet::from_episodes(calib)?,
                test: EpisodeSet::from_episodes(test)?,
            })
        }
    }
}
