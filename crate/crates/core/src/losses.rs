//! Return-decomposition and shaping objectives evaluated on predicted rewards.
//!
//! These are pure functions of per-step predictions; the network-facing
//! versions with gradients live in [`crate::objective`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeliConfig {
    /// Weight of the decomposition term; `1 - lambda` weights the proxy term.
    pub lambda: f64,
    /// Subset size for the randomized estimator; `None` uses every step.
    pub rrd_k: Option<usize>,
    /// Mixed into the run seed for the subset streams.
    pub rng_seed: u64,
}

impl Default for GeliConfig {
    fn default() -> Self {
        GeliConfig {
            lambda: 0.5,
            rrd_k: Some(32),
            rng_seed: 0,
        }
    }
}

impl GeliConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.rrd_k == Some(0) {
            return Err(Error::invalid("rrd_k must be positive"));
        }
        Ok(())
    }
}

/// Sorted, distinct step indices drawn for one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSubset(Vec<usize>);

impl IndexSubset {
    pub fn full(horizon: usize) -> Self {
        IndexSubset((0..horizon).collect())
    }

    pub fn from_indices(mut indices: Vec<usize>, horizon: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.last().is_some_and(|&i| i >= horizon) {
            return Err(Error::invalid("subset must be nonempty and within the horizon"));
        }
        Ok(IndexSubset(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_aligned(rewards: &[Vec<f64>], returns: &[f64]) -> Result<()> {
    if rewards.len() != returns.len() {
        return Err(Error::invalid(format!(
            "{} reward lists for {} returns",
            rewards.len(),
            returns.len()
        )));
    }
    if rewards.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if rewards.iter().any(Vec::is_empty) {
        return Err(Error::invalid("trajectory with no steps"));
    }
    Ok(())
}

/// Mean over trajectories of `(R - Σ_t r̂_t)²`.
pub fn loss_ge(rewards: &[Vec<f64>], returns: &[f64]) -> Result<f64> {
    check_aligned(rewards, returns)?;
    let total: f64 = rewards
        .iter()
        .zip(returns)
        .map(|(r, ret)| (ret - r.iter().sum::<f64>()).powi(2))
        .sum();
    Ok(total / rewards.len() as f64)
}

/// Uniformly samples `k` distinct indices from `0..horizon`.
pub fn sample_index_subset<R: Rng + ?Sized>(
    horizon: usize,
    k: usize,
    rng: &mut R,
) -> Result<IndexSubset> {
    if k == 0 || k > horizon {
        return Err(Error::invalid(format!(
            "subset size {k} must be in 1..={horizon}"
        )));
    }
    if k == horizon {
        return Ok(IndexSubset::full(horizon));
    }
    let mut idx = rand::seq::index::sample(rng, horizon, k).into_vec();
    idx.sort_unstable();
    Ok(IndexSubset(idx))
}

/// Scaled subset sum `(T / |I|) · Σ_{t∈I} r̂_t`, an unbiased estimate of `Σ_t r̂_t`.
pub fn rrd_estimate(rewards: &[f64], subset: &IndexSubset) -> f64 {
    let s: f64 = subset.indices().iter().map(|&i| rewards[i]).sum();
    rewards.len() as f64 / subset.len() as f64 * s
}

pub fn loss_rrd_with_subsets(
    rewards: &[Vec<f64>],
    returns: &[f64],
    subsets: &[IndexSubset],
) -> Result<f64> {
    check_aligned(rewards, returns)?;
    if subsets.len() != rewards.len() {
        return Err(Error::invalid("one subset per trajectory required"));
    }
    let mut total = 0.0;
    for ((r, ret), sub) in rewards.iter().zip(returns).zip(subsets) {
        if sub.indices().last().is_some_and(|&i| i >= r.len()) {
            return Err(Error::invalid("subset index beyond horizon"));
        }
        total += (ret - rrd_estimate(r, sub)).powi(2);
    }
    Ok(total / rewards.len() as f64)
}

/// Randomized return decomposition with one fresh subset per trajectory.
pub fn loss_rrd<R: Rng + ?Sized>(
    rewards: &[Vec<f64>],
    returns: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    check_aligned(rewards, returns)?;
    let subsets = rewards
        .iter()
        .map(|r| sample_index_subset(r.len(), k, rng))
        .collect::<Result<Vec<_>>>()?;
    loss_rrd_with_subsets(rewards, returns, &subsets)
}

/// Indicator score: 1 for a positive-affect label, 0 otherwise.
pub fn gamma_score(label: Option<bool>) -> Result<f64> {
    match label {
        Some(true) => Ok(1.0),
        Some(false) => Ok(0.0),
        None => Err(Error::invalid("score requested for an unlabeled step")),
    }
}

/// Mean over labeled steps of `(Γ(label) - r̂)²`.
pub fn loss_li(rewards: &[f64], labels: &[bool]) -> Result<f64> {
    if rewards.len() != labels.len() {
        return Err(Error::invalid("rewards and labels are not aligned"));
    }
    if rewards.is_empty() {
        return Err(Error::NoLabeledSteps);
    }
    let total: f64 = rewards
        .iter()
        .zip(labels)
        .map(|(r, &l)| (f64::from(u8::from(l)) - r).powi(2))
        .sum();
    Ok(total / rewards.len() as f64)
}

pub fn loss_geli(ge_part: f64, li_part: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(ge_part);
    }
    if lambda == 0.0 {
        return Ok(li_part);
    }
    Ok(lambda * ge_part + (1.0 - lambda) * li_part)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrcrNormalization {
    #[default]
    MinMax,
    ZScore,
}

/// Affine map from returns to proxy targets: `(R - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    pub offset: f64,
    pub scale: f64,
}

impl ReturnNormalizer {
    pub fn fit(dataset: &Dataset, kind: IrcrNormalization) -> Result<Self> {
        let returns: Vec<f64> = dataset
            .trajectories()
            .iter()
            .map(|t| t.global_return())
            .collect();
        let degenerate = || {
            Error::Degenerate(
                "all trajectory returns are equal; use the mean baseline instead".into(),
            )
        };
        match kind {
            IrcrNormalization::MinMax => {
                let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi <= lo {
                    return Err(degenerate());
                }
                Ok(ReturnNormalizer {
                    offset: lo,
                    scale: hi - lo,
                })
            }
            IrcrNormalization::ZScore => {
                let n = returns.len() as f64;
                let mean = returns.iter().sum::<f64>() / n;
                let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
                if var <= 0.0 {
                    return Err(degenerate());
                }
                Ok(ReturnNormalizer {
                    offset: mean,
                    scale: var.sqrt(),
                })
            }
        }
    }

    pub fn normalize(&self, ret: f64) -> f64 {
        (ret - self.offset) / self.scale
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.offset + self.scale * value
    }
}

/// Uniform redistribution: every step of a trajectory receives its normalized return.
pub fn ircr_proxy(dataset: &Dataset, kind: IrcrNormalization) -> Result<Vec<Vec<f64>>> {
    let norm = ReturnNormalizer::fit(dataset, kind)?;
    Ok(dataset
        .trajectories()
        .iter()
        .map(|t| vec![norm.normalize(t.global_return()); t.horizon()])
        .collect())
}

/// Predictive differences of consecutive prefix predictions.
pub fn rudder_credit(prefix_predictions: &[f64]) -> Result<Vec<f64>> {
    if prefix_predictions.len() < 2 {
        return Err(Error::invalid("need predictions for at least two prefixes"));
    }
    Ok(prefix_predictions.windows(2).map(|w| w[1] - w[0]).collect())
}
