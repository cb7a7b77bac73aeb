//! Softmax policy over a discrete action vocabulary, adapted against a learned
//! reward with a clipped surrogate objective and a KL penalty to a frozen
//! reference policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Kind};
use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::reward_net::{AdamWConfig, AdamWState, Gradients, ParamSet};
use crate::rng;
use crate::stats;
use crate::synth::ActionVocabulary;

/// Linear logits `W·s + b` over `num_actions` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    num_actions: usize,
    state_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters, i.e. the uniform policy.
    pub fn uniform(num_actions: usize, state_dim: usize) -> Self {
        PolicyParams {
            num_actions,
            state_dim,
            weights: vec![0.0; num_actions * state_dim],
            bias: vec![0.0; num_actions],
        }
    }

    pub fn from_parts(
        num_actions: usize,
        state_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if num_actions == 0 || state_dim == 0 {
            return Err(Error::invalid("policy needs at least one action and state feature"));
        }
        if weights.len() != num_actions * state_dim || bias.len() != num_actions {
            return Err(Error::invalid("policy parameter shapes are inconsistent"));
        }
        if weights.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(PolicyParams {
            num_actions,
            state_dim,
            weights,
            bias,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        let z: Vec<f64> = self
            .weights
            .chunks_exact(self.state_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(state).map(|(w, s)| w * s).sum::<f64>())
            .collect();
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(z)
    }

    /// Numerically stable log-softmax of the logits.
    pub fn log_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(state)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(z.into_iter().map(|x| x - lse).collect())
    }

    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probs(state)?.into_iter().map(f64::exp).collect())
    }
}

impl ParamSet for PolicyParams {
    fn tensor_names(&self) -> Vec<String> {
        vec!["policy.weight".into(), "policy.bias".into()]
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Frozen copy of the policy at the start of adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn freeze(policy: &PolicyParams) -> Self {
        ReferencePolicy(policy.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_range: f64,
    /// Coefficient of the KL penalty to the reference policy.
    pub kl_coeff: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub use_score_norm: bool,
    pub epochs_per_batch: usize,
    /// Number of rollout/update iterations in an adaptation run.
    pub iterations: usize,
    pub num_actions: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_range: 0.2,
            kl_coeff: 0.05,
            lr: 1.4e-5,
            batch_size: 24,
            use_score_norm: true,
            epochs_per_batch: 4,
            iterations: 200,
            num_actions: 16,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_range.is_nan() || self.clip_range <= 0.0 {
            return Err(Error::invalid("clip_range must be positive"));
        }
        if self.kl_coeff.is_nan() || self.kl_coeff < 0.0 {
            return Err(Error::invalid("kl_coeff must be non-negative"));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::invalid("ppo lr must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs_per_batch == 0 || self.num_actions == 0 {
            return Err(Error::invalid("batch_size, epochs_per_batch and num_actions must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub state: Vec<f64>,
    pub action: usize,
    /// Log-probability of `action` under the behaviour policy.
    pub log_prob: f64,
}

/// Samples one action per state by inverse CDF on the softmax.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyParams,
    states: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<RolloutRecord>> {
    if states.is_empty() {
        return Err(Error::invalid("rollout needs at least one state"));
    }
    states
        .iter()
        .map(|s| {
            let lp = policy.log_probs(s)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut action = lp.len() - 1;
            for (a, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    action = a;
                    break;
                }
            }
            Ok(RolloutRecord {
                state: s.clone(),
                action,
                log_prob: lp[action],
            })
        })
        .collect()
}

fn kl_at_state(lp: &[f64], lr: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (p, r) in lp.iter().zip(lr) {
        let prob = p.exp();
        if prob == 0.0 {
            continue;
        }
        if *r == f64::NEG_INFINITY {
            return Err(Error::Degenerate(
                "reference assigns zero probability to a policy action".into(),
            ));
        }
        kl += prob * (p - r);
    }
    Ok(kl.max(0.0))
}

/// Mean over states of KL(π_φ(·|s) ‖ π_ref(·|s)).
pub fn kl_divergence(
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    states: &[Vec<f64>],
) -> Result<f64> {
    if policy.num_actions != reference.0.num_actions {
        return Err(Error::invalid("policy and reference vocabularies differ"));
    }
    if states.is_empty() {
        return Err(Error::invalid("KL needs at least one state"));
    }
    let mut total = 0.0;
    for s in states {
        total += kl_at_state(&policy.log_probs(s)?, &reference.0.log_probs(s)?)?;
    }
    Ok(total / states.len() as f64)
}

/// Rewards centred on the batch mean and, with score normalization, scaled to unit variance.
pub fn advantages(rewards: &[f64], score_norm: bool) -> Vec<f64> {
    let m = stats::mean(rewards);
    // A spread within round-off of the mean carries no signal; centring would leave only noise.
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 4.0 * f64::EPSILON * m.abs() {
        return vec![0.0; rewards.len()];
    }
    let centred: Vec<f64> = rewards.iter().map(|r| r - m).collect();
    if !score_norm || rewards.len() < 2 {
        return centred;
    }
    let sd = stats::variance(rewards).sqrt();
    if sd > 0.0 {
        centred.into_iter().map(|a| a / sd).collect()
    } else {
        vec![0.0; rewards.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_reward: f64,
    /// KL to the reference after the update, over the batch states.
    pub kl: f64,
    /// Fraction of ratios outside `1 ± clip_range`, averaged over epochs.
    pub clip_fraction: f64,
    /// Clipped surrogate minus the KL penalty, at the start of the last epoch.
    pub objective: f64,
}

/// Objective value and the gradient of its negation (for a minimizing optimizer).
fn surrogate_gradient(
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &[RolloutRecord],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<(f64, Gradients, usize)> {
    let n = batch.len() as f64;
    let d = policy.state_dim;
    let mut grads = Gradients::zeros_like(policy);
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0;
    for (rec, &a_hat) in batch.iter().zip(adv) {
        let lp = policy.log_probs(&rec.state)?;
        let lref = reference.0.log_probs(&rec.state)?;
        let ratio = (lp[rec.action] - rec.log_prob).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("probability ratio".into()));
        }
        let lo = 1.0 - cfg.clip_range;
        let hi = 1.0 + cfg.clip_range;
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        let unclipped = ratio * a_hat;
        let clipped_term = ratio.clamp(lo, hi) * a_hat;
        surrogate += unclipped.min(clipped_term);
        let surrogate_active = unclipped <= clipped_term;

        let kl_s = kl_at_state(&lp, &lref)?;
        kl += kl_s;

        // d(objective)/d(logits) for this sample, before batch averaging.
        let mut dz = vec![0.0; policy.num_actions];
        if surrogate_active && a_hat != 0.0 {
            for (j, l) in lp.iter().enumerate() {
                let ind = if j == rec.action { 1.0 } else { 0.0 };
                dz[j] += a_hat * ratio * (ind - l.exp());
            }
        }
        if cfg.kl_coeff > 0.0 {
            for (j, (l, r)) in lp.iter().zip(&lref).enumerate() {
                let p = l.exp();
                if p > 0.0 {
                    dz[j] -= cfg.kl_coeff * p * ((l - r) - kl_s);
                }
            }
        }
        // Negate for minimization and average over the batch.
        let (gw, gb) = grads.tensors.split_at_mut(1);
        for (j, dzj) in dz.iter().enumerate() {
            let g = -dzj / n;
            if g == 0.0 {
                continue;
            }
            gb[0][j] += g;
            gw[0][j * d..(j + 1) * d]
                .iter_mut()
                .zip(&rec.state)
                .for_each(|(w, s)| *w += g * s);
        }
    }
    Ok((surrogate / n - cfg.kl_coeff * kl / n, grads, clipped))
}

/// Clipped-surrogate ascent with KL penalty for `cfg.epochs_per_batch` epochs on one batch.
pub fn ppo_update(
    policy: &mut PolicyParams,
    reference: &ReferencePolicy,
    optimizer: &mut AdamWState,
    batch: &[RolloutRecord],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<PpoStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty PPO batch"));
    }
    if rewards.len() != batch.len() {
        return Err(Error::invalid("one reward per rollout record required"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rollout rewards".into()));
    }
    let adv = advantages(rewards, cfg.use_score_norm);
    let mut clipped = 0;
    let mut objective = 0.0;
    for _ in 0..cfg.epochs_per_batch {
        let (obj, grads, c) = surrogate_gradient(policy, reference, batch, &adv, cfg)?;
        objective = obj;
        clipped += c;
        optimizer.step(policy, &grads)?;
    }
    let states: Vec<Vec<f64>> = batch.iter().map(|r| r.state.clone()).collect();
    Ok(PpoStats {
        mean_reward: stats::mean(rewards),
        kl: kl_divergence(policy, reference, &states)?,
        clip_fraction: clipped as f64 / (batch.len() * cfg.epochs_per_batch) as f64,
        objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub mean_return: f64,
    pub standard_error: f64,
    pub episodes: usize,
}

/// Monte-Carlo estimate of the expected true episode return `E[Σ_t g(a_t)]`.
pub fn evaluate_policy(
    policy: &PolicyParams,
    episodes: &[Vec<Vec<f64>>],
    true_rewards: &[f64],
    seed: u64,
) -> Result<PolicyEvaluation> {
    if episodes.is_empty() || episodes.iter().any(Vec::is_empty) {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if true_rewards.len() != policy.num_actions {
        return Err(Error::invalid("true rewards do not cover the action vocabulary"));
    }
    let returns = episodes
        .iter()
        .enumerate()
        .map(|(i, states)| {
            let mut r = rng::stream(seed, &[0xE7A1, i as u64]);
            Ok(rollout(policy, states, &mut r)?
                .iter()
                .map(|rec| true_rewards[rec.action])
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PolicyEvaluation {
        mean_return: stats::mean(&returns),
        standard_error: stats::standard_error(&returns),
        episodes: returns.len(),
    })
}

/// Exact expected true return per episode, averaged over episodes.
pub fn expected_return(
    policy: &PolicyParams,
    episodes: &[Vec<Vec<f64>>],
    true_rewards: &[f64],
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for states in episodes {
        for s in states {
            total += policy
                .probs(s)?
                .iter()
                .zip(true_rewards)
                .map(|(p, g)| p * g)
                .sum::<f64>();
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Reward closure for [`adapt_policy`] backed by a learned reward model.
pub fn model_reward<'a>(
    model: &'a RewardModel,
    vocab: &'a ActionVocabulary,
) -> impl FnMut(&[f64], usize) -> Result<f64> + 'a {
    move |state, action| model.score(state, &vocab.features[action])
}

/// Reward closure returning the hidden true reward of each action.
pub fn oracle_reward(vocab: &ActionVocabulary) -> impl FnMut(&[f64], usize) -> Result<f64> + '_ {
    move |_, action| Ok(vocab.true_rewards[action])
}

/// One logged adaptation iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlLogEntry {
    pub step: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    /// Mean true reward of the sampled actions, when ground truth is known.
    pub true_reward: Option<f64>,
}

/// Runs `cfg.iterations` rollout/update rounds from the uniform policy.
/// `reward(state, action_id)` scores each sampled action.
pub fn adapt_policy<F>(
    mut reward: F,
    vocab: &ActionVocabulary,
    state_pool: &[Vec<f64>],
    cfg: &PpoConfig,
    known_truth: bool,
) -> Result<(PolicyParams, AdamWState, Vec<RlLogEntry>)>
where
    F: FnMut(&[f64], usize) -> Result<f64>,
{
    cfg.validate()?;
    if state_pool.is_empty() {
        return Err(Error::invalid("state pool is empty"));
    }
    if vocab.len() != cfg.num_actions {
        return Err(Error::invalid("vocabulary size differs from num_actions"));
    }
    let mut policy = PolicyParams::uniform(vocab.len(), state_pool[0].len());
    let reference = ReferencePolicy::freeze(&policy);
    let mut opt = AdamWState::new(cfg.optimizer(), &policy);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut r = rng::stream(cfg.seed, &[0xADA9, it as u64]);
        let states: Vec<Vec<f64>> = (0..cfg.batch_size)
            .map(|_| state_pool[r.random_range(0..state_pool.len())].clone())
            .collect();
        let batch = rollout(&policy, &states, &mut r)?;
        let rewards = batch
            .iter()
            .map(|rec| reward(&rec.state, rec.action))
            .collect::<Result<Vec<f64>>>()?;
        let true_reward = known_truth.then(|| {
            stats::mean(
                &batch
                    .iter()
                    .map(|rec| vocab.true_rewards[rec.action])
                    .collect::<Vec<_>>(),
            )
        });
        let st = ppo_update(&mut policy, &reference, &mut opt, &batch, &rewards, cfg)?;
        log.push(RlLogEntry {
            step: it,
            mean_reward: st.mean_reward,
            kl: st.kl,
            clip_fraction: st.clip_fraction,
            true_reward,
        });
    }
    Ok((policy, opt, log))
}

pub fn save_policy(
    policy: &PolicyParams,
    state: &AdamWState,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let shapes = vec![
        (policy.num_actions as u32, policy.state_dim as u32),
        (policy.num_actions as u32, 1),
    ];
    Container::from_parts(Kind::Policy, 0, shapes, policy, state).write(path.as_ref())
}

pub fn load_policy(path: impl AsRef<std::path::Path>) -> Result<(PolicyParams, AdamWState)> {
    let c = Container::read(path.as_ref())?;
    if c.kind != Kind::Policy || c.shapes.len() != 2 {
        return Err(Error::CheckpointCorrupt("not a policy checkpoint".into()));
    }
    let (shapes, mut params, state) = c.into_parts();
    let bias = params.pop().unwrap_or_default();
    let weights = params.pop().unwrap_or_default();
    let policy = PolicyParams::from_parts(shapes[0].0 as usize, shapes[0].1 as usize, weights, bias)
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    Ok((policy, state))
}
