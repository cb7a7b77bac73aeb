//! Training objectives for the reward network with exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, GeliConfig, IndexSubset, ReturnNormalizer};
use crate::reward_net::{ForwardCache, Gradients, RewardNet};
use crate::rng;
use crate::traj::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossId {
    Ge,
    Rrd,
    Li,
    Geli,
    RudderReturn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Least-squares decomposition over every step.
    Ge,
    /// Randomized decomposition; `k` is clamped to each trajectory's horizon.
    Rrd { k: usize },
    /// Regression of labeled steps onto the indicator score.
    Li,
    /// `lambda · (GE or RRD) + (1 - lambda) · LI`.
    Geli { lambda: f64, k: Option<usize> },
    /// Return regression from every prefix (lengths `0..=T`) of mean step features.
    RudderReturn,
    /// Per-step regression onto the normalized trajectory return.
    Ircr(ReturnNormalizer),
}

impl Objective {
    pub fn from_config(id: LossId, cfg: &GeliConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match id {
            LossId::Ge => Objective::Ge,
            LossId::Rrd => Objective::Rrd {
                k: cfg.rrd_k.ok_or_else(|| Error::invalid("RRD needs rrd_k"))?,
            },
            LossId::Li => Objective::Li,
            LossId::Geli => Objective::Geli {
                lambda: cfg.lambda,
                k: cfg.rrd_k,
            },
            LossId::RudderReturn => Objective::RudderReturn,
        })
    }

    pub fn uses_labels(&self) -> bool {
        matches!(self, Objective::Li | Objective::Geli { .. })
    }
}

/// Subsets drawn for each batch position; stream depends on `(seed, salt, position)` only.
pub fn rrd_subsets(batch: &[&Trajectory], k: usize, seed: u64, salt: u64) -> Result<Vec<IndexSubset>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = rng::stream(seed, &[salt, i as u64]);
            losses::sample_index_subset(t.horizon(), k.min(t.horizon()), &mut r)
        })
        .collect()
}

/// Network inputs for prefixes of length `0..=T`: the running mean of
/// `[state; action]`, with the zero vector for the empty prefix.
pub fn prefix_inputs(traj: &Trajectory) -> Vec<Vec<f64>> {
    let dim = 2 * traj.feature_dim();
    let mut sum = vec![0.0; dim];
    let mut out = Vec::with_capacity(traj.horizon() + 1);
    out.push(vec![0.0; dim]);
    for (t, s) in traj.steps().iter().enumerate() {
        for (acc, x) in sum.iter_mut().zip(s.state.iter().chain(&s.action)) {
            *acc += x;
        }
        let n = (t + 1) as f64;
        out.push(sum.iter().map(|v| v / n).collect());
    }
    out
}

struct Backprop<'a> {
    net: &'a RewardNet,
    grads: Gradients,
    input: Vec<f64>,
    caches: Vec<ForwardCache>,
}

impl<'a> Backprop<'a> {
    fn new(net: &'a RewardNet) -> Self {
        Backprop {
            net,
            grads: Gradients::zeros_like(net),
            input: Vec::new(),
            caches: Vec::new(),
        }
    }

    /// Forward on the selected steps, caching activations in slot order.
    fn forward_steps(&mut self, traj: &Trajectory, which: &[usize]) -> Result<Vec<f64>> {
        self.caches.resize_with(which.len().max(self.caches.len()), ForwardCache::default);
        let mut out = Vec::with_capacity(which.len());
        for (slot, &t) in which.iter().enumerate() {
            let s = &traj.steps()[t];
            self.input.clear();
            self.input.extend_from_slice(&s.state);
            self.input.extend_from_slice(&s.action);
            out.push(self.net.forward_cached(&self.input, &mut self.caches[slot])?);
        }
        Ok(out)
    }

    fn forward_inputs(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.caches.resize_with(inputs.len().max(self.caches.len()), ForwardCache::default);
        inputs
            .iter()
            .zip(&mut self.caches)
            .map(|(x, c)| self.net.forward_cached(x, c))
            .collect()
    }

    fn backward(&mut self, slot: usize, dout: f64) {
        if dout != 0.0 {
            self.net.backward(&self.caches[slot], dout, &mut self.grads);
        }
    }
}

fn labeled_count(batch: &[&Trajectory]) -> usize {
    batch.iter().map(|t| t.labeled_steps().count()).sum()
}

/// Loss value and its exact gradient with respect to every network parameter.
///
/// Decomposition terms are averaged over trajectories, the proxy term over
/// labeled steps. `seed` and `salt` fix the RRD subsets.
pub fn loss_gradient(
    net: &RewardNet,
    batch: &[&Trajectory],
    objective: &Objective,
    seed: u64,
    salt: u64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = batch.len() as f64;
    let mut bp = Backprop::new(net);
    let mut loss = 0.0;

    // Weights of the decomposition and proxy parts.
    let (ge_w, li_w, k) = match *objective {
        Objective::Ge => (1.0, 0.0, None),
        Objective::Rrd { k } => (1.0, 0.0, Some(k)),
        Objective::Li => (0.0, 1.0, None),
        Objective::Geli { lambda, k } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
            }
            (lambda, 1.0 - lambda, k)
        }
        Objective::RudderReturn => {
            for traj in batch {
                let inputs = prefix_inputs(traj);
                let m = inputs.len() as f64;
                let preds = bp.forward_inputs(&inputs)?;
                for (slot, p) in preds.iter().enumerate() {
                    let e = traj.global_return() - p;
                    loss += e * e / (m * n);
                    bp.backward(slot, -2.0 * e / (m * n));
                }
            }
            return Ok((loss, bp.grads));
        }
        Objective::Ircr(norm) => {
            let total_steps: usize = batch.iter().map(|t| t.horizon()).sum();
            let ns = total_steps as f64;
            for traj in batch {
                let target = norm.normalize(traj.global_return());
                let all: Vec<usize> = (0..traj.horizon()).collect();
                let preds = bp.forward_steps(traj, &all)?;
                for (slot, p) in preds.iter().enumerate() {
                    let e = target - p;
                    loss += e * e / ns;
                    bp.backward(slot, -2.0 * e / ns);
                }
            }
            return Ok((loss, bp.grads));
        }
    };

    let m = if objective.uses_labels() {
        let m = labeled_count(batch);
        if m == 0 {
            return Err(Error::NoLabeledSteps);
        }
        m as f64
    } else {
        1.0
    };
    if k == Some(0) {
        return Err(Error::invalid("rrd_k must be positive"));
    }
    let subsets = match k {
        Some(k) => Some(rrd_subsets(batch, k, seed, salt)?),
        None => None,
    };

    let mut ge_sum = 0.0;
    let mut li_sum = 0.0;
    for (i, traj) in batch.iter().enumerate() {
        let horizon = traj.horizon();
        // Steps that enter the decomposition term.
        let ge_steps: Vec<usize> = match &subsets {
            Some(s) if li_w == 0.0 => s[i].indices().to_vec(),
            _ => (0..horizon).collect(),
        };
        let all_steps = ge_steps.len() == horizon;
        let preds = bp.forward_steps(traj, &ge_steps)?;
        let mut dout = vec![0.0; preds.len()];

        if ge_w > 0.0 {
            let (scale, members): (f64, Vec<usize>) = match &subsets {
                Some(s) => {
                    let sub = &s[i];
                    let slots = if all_steps {
                        sub.indices().to_vec()
                    } else {
                        (0..sub.len()).collect()
                    };
                    (horizon as f64 / sub.len() as f64, slots)
                }
                None => (1.0, (0..horizon).collect()),
            };
            let estimate = scale * members.iter().map(|&j| preds[j]).sum::<f64>();
            let e = traj.global_return() - estimate;
            ge_sum += e * e / n;
            for &j in &members {
                dout[j] += ge_w * (-2.0 * e * scale / n);
            }
        }
        if li_w > 0.0 {
            for (t, step) in traj.steps().iter().enumerate() {
                if let Some(label) = step.mm_label {
                    let e = losses::gamma_score(Some(label))? - preds[t];
                    li_sum += e * e / m;
                    dout[t] += li_w * (-2.0 * e / m);
                }
            }
        }
        for (slot, d) in dout.into_iter().enumerate() {
            bp.backward(slot, d);
        }
    }
    loss += match *objective {
        Objective::Geli { lambda, .. } => losses::loss_geli(ge_sum, li_sum, lambda)?,
        Objective::Li => li_sum,
        _ => ge_sum,
    };
    Ok((loss, bp.grads))
}

/// Loss value only (same subsets as [`loss_gradient`] for equal `seed`/`salt`).
pub fn loss_value(
    net: &RewardNet,
    batch: &[&Trajectory],
    objective: &Objective,
    seed: u64,
    salt: u64,
) -> Result<f64> {
    loss_gradient(net, batch, objective, seed, salt).map(|(l, _)| l)
}
