//! Synthetic delayed-reward "conversations" with hidden per-step rewards.
//!
//! Each step draws a latent quality `q` from a two-component mixture (mostly
//! filler turns, some high-value turns). The action features embed `q` along
//! a seeded direction plus isotropic noise, the state features are a
//! per-episode topic vector plus noise, the true step reward is
//! `g = reward_scale · q`, and the episode only reveals `Σ g + ε`.
//! A binary proxy label agrees with `g > median(g)` with probability `p`.
//!
//! All sampling goes through ChaCha8 streams and `rand_distr`'s ziggurat
//! normal sampler, so datasets are bit-identical across platforms.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::rng;
use crate::stats;
use crate::traj::{Dataset, SplitTag, Step, Trajectory};

/// Mixture weight of high-value turns.
pub const HIGH_VALUE_FRACTION: f64 = 0.2;
/// Mean latent quality of a high-value turn (filler turns have mean 0; both have unit variance).
pub const HIGH_VALUE_MEAN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub feature_dim: usize,
    pub num_trajectories: usize,
    /// Probability that the proxy label agrees with the above-median indicator.
    pub proxy_accuracy: f64,
    pub return_noise_sigma: f64,
    pub reward_scale: f64,
    /// Per-coordinate noise on state and action features.
    pub feature_noise: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 20,
            feature_dim: 16,
            num_trajectories: 600,
            proxy_accuracy: 0.9,
            return_noise_sigma: 0.0,
            reward_scale: 1.0,
            feature_noise: 0.5,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("env config: {m}")));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.num_trajectories == 0 {
            return bad("num_trajectories must be positive");
        }
        if !(0.5..=1.0).contains(&self.proxy_accuracy) {
            return bad("proxy_accuracy must be in [0.5, 1]");
        }
        if !(self.return_noise_sigma >= 0.0 && self.return_noise_sigma.is_finite()) {
            return bad("return_noise_sigma must be finite and non-negative");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale must be positive");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// Hidden per-step rewards aligned with the dataset's trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub per_step: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn flat(&self) -> Vec<f64> {
        self.per_step.iter().flatten().copied().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth {
            per_step: indices.iter().map(|&i| self.per_step[i].clone()).collect(),
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn latent_quality<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let high = rng.random::<f64>() < HIGH_VALUE_FRACTION;
    normal(rng) + if high { HIGH_VALUE_MEAN } else { 0.0 }
}

/// Seeded unit direction along which action features encode quality.
fn quality_direction(cfg: &EnvConfig) -> Vec<f64> {
    let mut r = rng::stream(cfg.seed, &[0xD1]);
    let v: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut r)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn action_features<R: Rng + ?Sized>(q: f64, dir: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    dir.iter().map(|d| q * d + noise * normal(rng)).collect()
}

fn state_features<R: Rng + ?Sized>(topic: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    topic.iter().map(|c| c + noise * normal(rng)).collect()
}

/// Draws a fresh dataset and its ground truth. Deterministic in `cfg`.
pub fn generate(cfg: &EnvConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let dir = quality_direction(cfg);
    let mut episodes = Vec::with_capacity(cfg.num_trajectories);
    let mut truth = Vec::with_capacity(cfg.num_trajectories);
    for i in 0..cfg.num_trajectories {
        let mut r = rng::stream(cfg.seed, &[0xE9, i as u64]);
        let topic: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut r)).collect();
        let mut steps = Vec::with_capacity(cfg.horizon);
        let mut g = Vec::with_capacity(cfg.horizon);
        for _ in 0..cfg.horizon {
            let q = latent_quality(&mut r);
            let state = state_features(&topic, cfg.feature_noise, &mut r);
            let action = action_features(q, &dir, cfg.feature_noise, &mut r);
            steps.push(Step::new(state, action, None));
            g.push(cfg.reward_scale * q);
        }
        let ret = g.iter().sum::<f64>() + cfg.return_noise_sigma * normal(&mut r);
        episodes.push((steps, ret));
        truth.push(g);
    }

    // Labels need the dataset-wide median, so they are drawn in a second pass.
    let flat: Vec<f64> = truth.iter().flatten().copied().collect();
    let threshold = stats::median(&flat);
    let mut label_rng = rng::stream(cfg.seed, &[0x1AB]);
    let mut trajectories = Vec::with_capacity(episodes.len());
    for ((mut steps, ret), g) in episodes.into_iter().zip(&truth) {
        for (step, &gt) in steps.iter_mut().zip(g) {
            let agree = label_rng.random::<f64>() < cfg.proxy_accuracy;
            let above = gt > threshold;
            step.mm_label = Some(if agree { above } else { !above });
        }
        trajectories.push(Trajectory::new(steps, ret)?);
    }
    Ok((
        Dataset::new(trajectories, SplitTag::Full)?,
        GroundTruth { per_step: truth },
    ))
}

/// Discrete action vocabulary for policy adaptation: features share the
/// dataset's quality direction, so a reward model fitted on the dataset
/// transfers to these actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVocabulary {
    pub features: Vec<Vec<f64>>,
    pub true_rewards: Vec<f64>,
}

impl ActionVocabulary {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn generate_vocabulary(cfg: &EnvConfig, size: usize, seed: u64) -> Result<ActionVocabulary> {
    cfg.validate()?;
    if size == 0 {
        return Err(Error::invalid("action vocabulary must be nonempty"));
    }
    let dir = quality_direction(cfg);
    let mut r = rng::stream(seed, &[0x7C]);
    let (features, true_rewards) = (0..size)
        .map(|_| {
            let q = latent_quality(&mut r);
            (
                action_features(q, &dir, cfg.feature_noise, &mut r),
                cfg.reward_scale * q,
            )
        })
        .unzip();
    Ok(ActionVocabulary {
        features,
        true_rewards,
    })
}

/// `episodes × horizon` state feature vectors drawn like the dataset's states.
pub fn generate_states(cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    Ok((0..episodes)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x57, i as u64]);
            let topic: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut r)).collect();
            (0..cfg.horizon)
                .map(|_| state_features(&topic, cfg.feature_noise, &mut r))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Correlation of predicted and true step rewards; 0 when degenerate.
    pub pearson_r: f64,
    /// MSE after the best affine map of predictions onto true rewards.
    pub per_step_mse: f64,
    /// Fraction of steps on the same side of their respective medians.
    pub sign_agreement: f64,
    /// Set when either side has zero variance.
    pub degenerate: bool,
}

pub fn oracle_report(predicted: &[f64], truth: &[f64]) -> Result<OracleReport> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid("predictions and truth are not aligned"));
    }
    if predicted.len() < 2 {
        return Err(Error::invalid("oracle evaluation needs at least two steps"));
    }
    let r = stats::pearson(predicted, truth);
    let (a, b) = stats::affine_fit(predicted, truth);
    let mse = stats::mean(
        &predicted
            .iter()
            .zip(truth)
            .map(|(p, g)| (g - (a + b * p)).powi(2))
            .collect::<Vec<_>>(),
    );
    let (mp, mg) = (stats::median(predicted), stats::median(truth));
    let agree = predicted
        .iter()
        .zip(truth)
        .filter(|(p, g)| (**p > mp) == (**g > mg))
        .count();
    Ok(OracleReport {
        pearson_r: r.unwrap_or(0.0),
        per_step_mse: mse,
        sign_agreement: agree as f64 / predicted.len() as f64,
        degenerate: r.is_none(),
    })
}

/// Compares a model's step rewards against the hidden ground truth.
pub fn oracle_eval(model: &RewardModel, dataset: &Dataset, truth: &GroundTruth) -> Result<OracleReport> {
    if truth.per_step.len() != dataset.len() {
        return Err(Error::invalid("ground truth does not match dataset"));
    }
    let mut predicted = Vec::with_capacity(dataset.num_steps());
    for (t, g) in dataset.trajectories().iter().zip(&truth.per_step) {
        if g.len() != t.horizon() {
            return Err(Error::invalid("ground truth horizon mismatch"));
        }
        predicted.extend(model.step_rewards(t)?);
    }
    oracle_report(&predicted, &truth.flat())
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    g: Vec<f64>,
}

pub fn write_truth_jsonl(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in &truth.per_step {
        serde_json::to_writer(&mut w, &TruthRecord { g: g.clone() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_jsonl(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let mut per_step = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TruthRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        per_step.push(rec.g);
    }
    Ok(GroundTruth { per_step })
}
