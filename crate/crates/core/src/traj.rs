//! Episodic trajectory data model, JSONL ingestion and seeded splitting.
//!
//! A [`Trajectory`] is an ordered list of [`Step`]s plus one session-level
//! return. Steps carry fixed-dimension state and action feature vectors,
//! either read verbatim from the file or produced by [`hash_featurize`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One turn: the dialogue history so far (state) and the agent's utterance (action).
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Binary proxy label; `Some(true)` is positive affect.
    pub mm_label: Option<bool>,
    pub raw_state_text: Option<String>,
    pub raw_action_text: Option<String>,
}

impl Step {
    pub fn new(state: Vec<f64>, action: Vec<f64>, mm_label: Option<bool>) -> Self {
        Step {
            state,
            action,
            mm_label,
            raw_state_text: None,
            raw_action_text: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.state.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    global_return: f64,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, global_return: f64) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Schema("trajectory has no steps".into()));
        }
        if !global_return.is_finite() {
            return Err(Error::NonFinite("global return".into()));
        }
        let dim = steps[0].state.len();
        for (t, s) in steps.iter().enumerate() {
            if s.state.len() != dim || s.action.len() != dim {
                return Err(Error::Schema(format!(
                    "step {t}: state/action dimensions {}/{} differ from {dim}",
                    s.state.len(),
                    s.action.len()
                )));
            }
        }
        Ok(Trajectory {
            steps,
            global_return,
        })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn global_return(&self) -> f64 {
        self.global_return
    }

    pub fn feature_dim(&self) -> usize {
        self.steps[0].feature_dim()
    }

    pub fn labeled_steps(&self) -> impl Iterator<Item = (&Step, bool)> {
        self.steps
            .iter()
            .filter_map(|s| s.mm_label.map(|l| (s, l)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    /// Not yet partitioned.
    Full,
    RewardTrain,
    RewardTest,
    PolicyTrain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, split: SplitTag) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyDataset)?;
        let dim = first.feature_dim();
        if let Some((i, t)) = trajectories
            .iter()
            .enumerate()
            .find(|(_, t)| t.feature_dim() != dim)
        {
            return Err(Error::Schema(format!(
                "trajectory {i} has feature dimension {}, expected {dim}",
                t.feature_dim()
            )));
        }
        Ok(Dataset {
            trajectories,
            split,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.trajectories[0].feature_dim()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::horizon).sum()
    }

    pub fn mean_horizon(&self) -> f64 {
        self.num_steps() as f64 / self.len() as f64
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    /// The trajectories at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<Dataset> {
        let mut picked = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self
                .trajectories
                .get(i)
                .ok_or_else(|| Error::invalid(format!("trajectory index {i} out of range")))?;
            picked.push(t.clone());
        }
        Dataset::new(picked, split)
    }

    pub fn has_labels(&self) -> bool {
        self.steps().any(|s| s.mm_label.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Precomputed,
    HashedText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub dimension: usize,
    pub mode: FeatureMode,
    pub hash_seed: u64,
}

impl FeatureSpec {
    pub fn precomputed(dimension: usize) -> Self {
        FeatureSpec {
            dimension,
            mode: FeatureMode::Precomputed,
            hash_seed: 0,
        }
    }

    pub fn hashed(dimension: usize, hash_seed: u64) -> Self {
        FeatureSpec {
            dimension,
            mode: FeatureMode::HashedText,
            hash_seed,
        }
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::hashed(256, 0)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a over the seed's little-endian bytes followed by the token bytes.
pub fn token_bucket(token: &str, seed: u64, dimension: usize) -> usize {
    let h = seed
        .to_le_bytes()
        .iter()
        .chain(token.as_bytes())
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME));
    (h % dimension as u64) as usize
}

/// Bag-of-tokens hashing featurizer. Whitespace tokens are bucketed with
/// [`token_bucket`], counted, and the count vector is L2-normalized.
/// Empty (or all-whitespace) text maps to the zero vector.
pub fn hash_featurize(text: &str, spec: &FeatureSpec) -> Result<Vec<f64>> {
    if spec.mode != FeatureMode::HashedText {
        return Err(Error::invalid("hash_featurize requires hashed_text mode"));
    }
    if spec.dimension == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let mut v = vec![0.0; spec.dimension];
    for tok in text.split_whitespace() {
        v[token_bucket(tok, spec.hash_seed, spec.dimension)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    #[serde(default)]
    state: Option<String>,
    #[serde(default)]
    action: Option<String>,
    #[serde(default)]
    state_vec: Option<Vec<f64>>,
    #[serde(default)]
    action_vec: Option<Vec<f64>>,
    #[serde(default)]
    mm: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    #[serde(rename = "return")]
    global_return: f64,
    steps: Vec<StepRecord>,
}

fn record_to_trajectory(rec: TrajectoryRecord, spec: &FeatureSpec) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(rec.steps.len());
    // History text for hashed states: all earlier turns plus the current state utterance.
    let mut history = String::new();
    for (t, s) in rec.steps.into_iter().enumerate() {
        let mm_label = match s.mm {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(x) => return Err(Error::Schema(format!("step {t}: mm must be 0 or 1, got {x}"))),
        };
        let has_text = s.state.is_some() || s.action.is_some();
        let has_vec = s.state_vec.is_some() || s.action_vec.is_some();
        let step = match spec.mode {
            FeatureMode::Precomputed => {
                if has_text {
                    return Err(Error::Schema(format!(
                        "step {t}: raw text given but features are precomputed"
                    )));
                }
                let (Some(state), Some(action)) = (s.state_vec, s.action_vec) else {
                    return Err(Error::Schema(format!(
                        "step {t}: missing state_vec/action_vec"
                    )));
                };
                for v in [&state, &action] {
                    if v.len() != spec.dimension {
                        return Err(Error::Schema(format!(
                            "step {t}: vector of length {} but dimension is {}",
                            v.len(),
                            spec.dimension
                        )));
                    }
                }
                Step::new(state, action, mm_label)
            }
            FeatureMode::HashedText => {
                if has_vec {
                    return Err(Error::Schema(format!(
                        "step {t}: feature vectors given but mode is hashed_text"
                    )));
                }
                let (Some(st), Some(at)) = (s.state, s.action) else {
                    return Err(Error::Schema(format!("step {t}: missing state/action text")));
                };
                if !history.is_empty() {
                    history.push(' ');
                }
                history.push_str(&st);
                let state = hash_featurize(&history, spec)?;
                let action = hash_featurize(&at, spec)?;
                history.push(' ');
                history.push_str(&at);
                Step {
                    state,
                    action,
                    mm_label,
                    raw_state_text: Some(st),
                    raw_action_text: Some(at),
                }
            }
        };
        steps.push(step);
    }
    Trajectory::new(steps, rec.global_return)
}

/// Reads one trajectory per non-blank line. Errors carry 1-based line numbers.
pub fn load_jsonl(path: impl AsRef<Path>, spec: &FeatureSpec) -> Result<Dataset> {
    if spec.dimension == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut trajectories = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let traj = record_to_trajectory(rec, spec).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("line {lineno}: {msg}")),
            Error::NonFinite(msg) => Error::Parse {
                line: lineno,
                msg: format!("non-finite {msg}"),
            },
            other => other,
        })?;
        trajectories.push(traj);
    }
    Dataset::new(trajectories, SplitTag::Full)
}

/// Writes trajectories in precomputed-vector form; `load_jsonl` with
/// [`FeatureSpec::precomputed`] reproduces them bit-for-bit.
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in dataset.trajectories() {
        let rec = TrajectoryRecord {
            global_return: t.global_return,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    state: None,
                    action: None,
                    state_vec: Some(s.state.clone()),
                    action_vec: Some(s.action.clone()),
                    mm: s.mm_label.map(u8::from),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded shuffle of `0..n` cut into three parts of sizes `round(f0·n)`,
/// `round(f1·n)` and the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|&f| f.is_nan() || f <= 0.0) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} do not sum to 1"
        )));
    }
    let n0 = (fractions[0] * n as f64).round() as usize;
    let n1 = (fractions[1] * n as f64).round() as usize;
    if n0 == 0 || n1 == 0 || n0 + n1 >= n {
        return Err(Error::invalid(format!(
            "split of {n} trajectories by {fractions:?} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5911]));
    Ok([
        order[..n0].to_vec(),
        order[n0..n0 + n1].to_vec(),
        order[n0 + n1..].to_vec(),
    ])
}

/// Partition by trajectory into (reward_train, reward_test, policy_train); see [`split_indices`].
pub fn split_dataset(
    dataset: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(dataset.len(), fractions, seed)?;
    Ok((
        dataset.subset(&a, SplitTag::RewardTrain)?,
        dataset.subset(&b, SplitTag::RewardTest)?,
        dataset.subset(&c, SplitTag::PolicyTrain)?,
    ))
}
