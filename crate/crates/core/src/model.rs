use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{rudder_credit, ReturnNormalizer};
use crate::objective::prefix_inputs;
use crate::reward_net::RewardNet;
use crate::traj::Trajectory;

/// A trained per-step reward function as produced by one of the credit-assignment methods.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// r̂_t = r_θ(s_t, a_t).
    Net(RewardNet),
    /// A regressor of normalized trajectory returns, mapped back to return
    /// units and spread evenly over `horizon` steps.
    Redistributed {
        net: RewardNet,
        normalizer: ReturnNormalizer,
        horizon: f64,
    },
    /// Return predictor over prefixes; r̂_t is the difference of consecutive prefix predictions.
    Rudder(RewardNet),
    Constant(f64),
}

/// Serializable description of everything in a [`RewardModel`] except network weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHead {
    Net,
    Redistributed {
        normalizer: ReturnNormalizer,
        horizon: f64,
    },
    Rudder,
    Constant { value: f64 },
}

impl RewardModel {
    pub fn head(&self) -> ModelHead {
        match self {
            RewardModel::Net(_) => ModelHead::Net,
            RewardModel::Redistributed {
                normalizer,
                horizon,
                ..
            } => ModelHead::Redistributed {
                normalizer: *normalizer,
                horizon: *horizon,
            },
            RewardModel::Rudder(_) => ModelHead::Rudder,
            RewardModel::Constant(value) => ModelHead::Constant { value: *value },
        }
    }

    pub fn net(&self) -> Option<&RewardNet> {
        match self {
            RewardModel::Net(n) | RewardModel::Rudder(n) => Some(n),
            RewardModel::Redistributed { net, .. } => Some(net),
            RewardModel::Constant(_) => None,
        }
    }

    pub fn from_head(head: ModelHead, net: Option<RewardNet>) -> Option<Self> {
        Some(match head {
            ModelHead::Net => RewardModel::Net(net?),
            ModelHead::Redistributed {
                normalizer,
                horizon,
            } => RewardModel::Redistributed {
                net: net?,
                normalizer,
                horizon,
            },
            ModelHead::Rudder => RewardModel::Rudder(net?),
            ModelHead::Constant { value } => RewardModel::Constant(value),
        })
    }

    /// Predicted reward for every step of `traj`.
    pub fn step_rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        match self {
            RewardModel::Net(net) => traj.steps().iter().map(|s| net.reward_step(s)).collect(),
            RewardModel::Redistributed {
                net,
                normalizer,
                horizon,
            } => traj
                .steps()
                .iter()
                .map(|s| Ok(normalizer.denormalize(net.reward_step(s)?) / horizon))
                .collect(),
            RewardModel::Rudder(net) => {
                let preds = prefix_inputs(traj)
                    .iter()
                    .map(|x| net.forward(x))
                    .collect::<Result<Vec<_>>>()?;
                rudder_credit(&preds)
            }
            RewardModel::Constant(v) => Ok(vec![*v; traj.horizon()]),
        }
    }

    /// Reward of a single (state, action) pair taken out of any episode context.
    /// The prefix model scores it as the first step of a fresh episode.
    pub fn score(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        match self {
            RewardModel::Net(net) => net.reward(state, action),
            RewardModel::Redistributed {
                net,
                normalizer,
                horizon,
            } => Ok(normalizer.denormalize(net.reward(state, action)?) / horizon),
            RewardModel::Rudder(net) => {
                let empty = vec![0.0; state.len() + action.len()];
                Ok(net.reward(state, action)? - net.forward(&empty)?)
            }
            RewardModel::Constant(v) => Ok(*v),
        }
    }
}

impl From<RewardNet> for RewardModel {
    fn from(net: RewardNet) -> Self {
        RewardModel::Net(net)
    }
}
