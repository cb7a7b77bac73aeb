//! Reward-function training for each credit-assignment method.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, BaselineKind};
use crate::losses::{GeliConfig, IrcrNormalization, ReturnNormalizer};
use crate::model::RewardModel;
use crate::objective::{self, Objective};
use crate::reward_net::{Activation, AdamWConfig, AdamWState, RewardNet};
use crate::rng;
use crate::traj::{Dataset, Trajectory};

const SALT_INIT: u64 = 0x1417;
const SALT_SHUFFLE: u64 = 0x5401;
const SALT_RRD: u64 = 0x7707;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mean,
    Mode,
    GeIrcr,
    GeRudder,
    GeRrd { k: usize },
    LiOnly,
    GeliRrdVa,
}

impl Method {
    /// Comparison grid in report order.
    pub fn default_grid() -> Vec<Method> {
        vec![
            Method::Mean,
            Method::Mode,
            Method::GeIrcr,
            Method::GeRudder,
            Method::GeRrd { k: 32 },
            Method::GeRrd { k: 160 },
            Method::LiOnly,
            Method::GeliRrdVa,
        ]
    }

    pub fn tag(&self) -> String {
        match self {
            Method::Mean => "Mean".into(),
            Method::Mode => "Mode".into(),
            Method::GeIrcr => "GE_IRCR".into(),
            Method::GeRudder => "GE_RUDDER".into(),
            Method::GeRrd { k } => format!("GE_RRD_K{k}"),
            Method::LiOnly => "LI_ONLY".into(),
            Method::GeliRrdVa => "GELI_RRD_VA".into(),
        }
    }

    pub fn uses_labels(&self) -> bool {
        matches!(self, Method::LiOnly | Method::GeliRrdVa)
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, Method::Mean | Method::Mode)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts report tags; bare `GE_RRD` means `K = 32`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Mean" | "MEAN" | "mean" => Method::Mean,
            "Mode" | "MODE" | "mode" => Method::Mode,
            "GE_IRCR" => Method::GeIrcr,
            "GE_RUDDER" => Method::GeRudder,
            "GE_RRD" => Method::GeRrd { k: 32 },
            "LI_ONLY" => Method::LiOnly,
            "GELI_RRD_VA" => Method::GeliRrdVa,
            other => match other.strip_prefix("GE_RRD_K").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Method::GeRrd { k },
                _ => return Err(Error::invalid(format!("unknown method {other:?}"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub lr: f64,
    /// Trajectories per step for decomposition-only methods.
    pub ge_batch_size: usize,
    /// Trajectories per step for methods with a proxy-label term.
    pub li_batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub weight_decay: f64,
    pub ircr_norm: IrcrNormalization,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            lr: 5e-6,
            ge_batch_size: 1,
            li_batch_size: 32,
            epochs: 20,
            eval_every: 1,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            weight_decay: 0.01,
            ircr_norm: IrcrNormalization::MinMax,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("reward lr {} must be finite and ≥ 0", self.lr)));
        }
        if self.ge_batch_size == 0 || self.li_batch_size == 0 {
            return Err(Error::invalid("reward batch sizes must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be finite and ≥ 0"));
        }
        Ok(())
    }

    pub fn batch_size(&self, method: Method) -> usize {
        if method.uses_labels() {
            self.li_batch_size
        } else {
            self.ge_batch_size
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::with_lr(self.lr)
        }
    }
}

/// One line of the append-only training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub step: u64,
    /// Mean objective over the epoch's optimization steps.
    pub train_loss: f64,
    /// Decomposition MSE of the current model on the training split.
    pub l_ge_train: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedReward {
    pub method: Method,
    pub model: RewardModel,
    /// `None` for constant baselines.
    pub optimizer: Option<AdamWState>,
    pub log: Vec<TrainLogEntry>,
}

/// Initial network for every learned method; identical across methods for one seed.
pub fn initial_network(input_dim: usize, cfg: &RewardTrainConfig, seed: u64) -> RewardNet {
    RewardNet::new(input_dim, &cfg.hidden, cfg.activation, rng::derive(seed, &[SALT_INIT]))
}

fn objective_for(
    method: Method,
    train: &Dataset,
    geli: &GeliConfig,
    cfg: &RewardTrainConfig,
) -> Result<Objective> {
    Ok(match method {
        Method::GeRrd { k } => Objective::Rrd { k },
        Method::GeIrcr => Objective::Ircr(ReturnNormalizer::fit(train, cfg.ircr_norm)?),
        Method::GeRudder => Objective::RudderReturn,
        Method::LiOnly => Objective::Li,
        Method::GeliRrdVa => Objective::Geli {
            lambda: geli.lambda,
            k: geli.rrd_k,
        },
        Method::Mean | Method::Mode => unreachable!("baselines have no objective"),
    })
}

fn wrap(method: Method, net: RewardNet, objective: &Objective, train: &Dataset) -> RewardModel {
    match (method, objective) {
        (Method::GeIrcr, Objective::Ircr(normalizer)) => RewardModel::Redistributed {
            net,
            normalizer: *normalizer,
            horizon: train.mean_horizon(),
        },
        (Method::GeRudder, _) => RewardModel::Rudder(net),
        _ => RewardModel::Net(net),
    }
}

/// Trains `method` on `train` from the shared initialization.
///
/// Each epoch visits every trajectory once in a seeded order; the RRD subsets
/// of an optimization step depend only on `(seed, global step)`.
pub fn train_reward(
    method: Method,
    train: &Dataset,
    geli: &GeliConfig,
    cfg: &RewardTrainConfig,
    seed: u64,
) -> Result<TrainedReward> {
    train_reward_from(method, train, geli, cfg, seed, None)
}

/// Continues a run from a network and optimizer state saved at an epoch
/// boundary. The result equals an uninterrupted run to `cfg.epochs`; the log
/// holds only the epochs trained here.
pub fn resume_reward(
    method: Method,
    train: &Dataset,
    geli: &GeliConfig,
    cfg: &RewardTrainConfig,
    seed: u64,
    net: RewardNet,
    optimizer: AdamWState,
) -> Result<TrainedReward> {
    train_reward_from(method, train, geli, cfg, seed, Some((net, optimizer)))
}

/// Trajectory indices of every optimization step in `epoch`.
fn epoch_batches(method: Method, trajs: &[Trajectory], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[SALT_SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .copied()
                .filter(|&i| !method.uses_labels() || trajs[i].labeled_steps().next().is_some())
                .collect::<Vec<_>>()
        })
        .filter(|b| !b.is_empty())
        .collect()
}

fn train_reward_from(
    method: Method,
    train: &Dataset,
    geli: &GeliConfig,
    cfg: &RewardTrainConfig,
    seed: u64,
    start: Option<(RewardNet, AdamWState)>,
) -> Result<TrainedReward> {
    cfg.validate()?;
    geli.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if method.is_baseline() {
        if start.is_some() {
            return Err(Error::invalid(format!("{method} has no trainable state")));
        }
        let kind = if method == Method::Mean {
            BaselineKind::Mean
        } else {
            BaselineKind::Mode
        };
        let baseline = eval::fit_constant_baseline(train, kind)?;
        return Ok(TrainedReward {
            method,
            model: baseline.model(),
            optimizer: None,
            log: Vec::new(),
        });
    }
    if method.uses_labels() && !train.has_labels() {
        return Err(Error::Schema(format!(
            "method {method} needs proxy labels but the dataset has none"
        )));
    }

    let objective = objective_for(method, train, geli, cfg)?;
    let batch_size = cfg.batch_size(method);
    let trajs = train.trajectories();
    let (mut net, mut opt, first_epoch) = match start {
        None => {
            let net = initial_network(2 * train.feature_dim(), cfg, seed);
            let opt = AdamWState::new(cfg.optimizer(), &net);
            (net, opt, 0)
        }
        Some((net, opt)) => {
            if net.input_dim() != 2 * train.feature_dim() {
                return Err(Error::DimensionMismatch {
                    expected: 2 * train.feature_dim(),
                    got: net.input_dim(),
                });
            }
            let mut done = 0u64;
            let mut epoch = 0;
            while done < opt.step_count {
                done += epoch_batches(method, trajs, batch_size, seed, epoch).len() as u64;
                epoch += 1;
            }
            if done != opt.step_count {
                return Err(Error::invalid(format!(
                    "step {} is not at an epoch boundary",
                    opt.step_count
                )));
            }
            (net, opt, epoch)
        }
    };
    let rrd_seed = rng::derive(seed, &[SALT_RRD, geli.rng_seed]);
    let mut log = Vec::new();

    for epoch in first_epoch..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(method, trajs, batch_size, seed, epoch);
        for idx in &batches {
            let batch: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
            let salt = opt.step_count;
            let (loss, grads) = objective::loss_gradient(&net, &batch, &objective, rrd_seed, salt)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{method} training loss at step {salt}"
                )));
            }
            opt.step(&mut net, &grads)?;
            loss_sum += loss;
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let model = wrap(method, net.clone(), &objective, train);
            let (l_ge_train, _) = eval::eval_decomposition(&model, train)?;
            log.push(TrainLogEntry {
                epoch: epoch + 1,
                step: opt.step_count,
                train_loss: loss_sum / batches.len().max(1) as f64,
                l_ge_train,
            });
        }
    }
    Ok(TrainedReward {
        method,
        model: wrap(method, net, &objective, train),
        optimizer: Some(opt),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, EnvConfig};

    fn small() -> Dataset {
        let cfg = EnvConfig {
            num_trajectories: 40,
            horizon: 6,
            feature_dim: 4,
            seed: 3,
            ..EnvConfig::default()
        };
        synth::generate(&cfg).unwrap().0
    }

    fn quick() -> RewardTrainConfig {
        RewardTrainConfig {
            lr: 1e-2,
            ge_batch_size: 4,
            li_batch_size: 8,
            epochs: 3,
            hidden: vec![8],
            ..RewardTrainConfig::default()
        }
    }

    #[test]
    fn tags_round_trip() {
        for m in Method::default_grid() {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert_eq!("GE_RRD".parse::<Method>().unwrap(), Method::GeRrd { k: 32 });
        assert!("GE_RRD_K0".parse::<Method>().is_err());
        assert!("RRD".parse::<Method>().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = small();
        let cfg = RewardTrainConfig {
            epochs: 0,
            ..quick()
        };
        let t = train_reward(Method::GeRrd { k: 3 }, &d, &GeliConfig::default(), &cfg, 5).unwrap();
        let init = initial_network(2 * d.feature_dim(), &cfg, 5);
        assert_eq!(t.model.net(), Some(&init));
        assert!(t.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let d = small();
        for m in [Method::GeliRrdVa, Method::GeRudder, Method::GeIrcr] {
            let a = train_reward(m, &d, &GeliConfig::default(), &quick(), 9).unwrap();
            let b = train_reward(m, &d, &GeliConfig::default(), &quick(), 9).unwrap();
            assert_eq!(a.model, b.model);
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn log_has_monotone_steps() {
        let d = small();
        let cfg = RewardTrainConfig {
            epochs: 5,
            eval_every: 2,
            ..quick()
        };
        let t = train_reward(Method::LiOnly, &d, &GeliConfig::default(), &cfg, 1).unwrap();
        let epochs: Vec<usize> = t.log.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 5]);
        assert!(t.log.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let d = small();
        let full_cfg = RewardTrainConfig {
            epochs: 6,
            ..quick()
        };
        let half_cfg = RewardTrainConfig {
            epochs: 3,
            ..quick()
        };
        for m in [Method::GeRrd { k: 3 }, Method::GeliRrdVa] {
            let geli = GeliConfig::default();
            let full = train_reward(m, &d, &geli, &full_cfg, 4).unwrap();
            let half = train_reward(m, &d, &geli, &half_cfg, 4).unwrap();
            let net = half.model.net().unwrap().clone();
            let rest = resume_reward(m, &d, &geli, &full_cfg, 4, net, half.optimizer.unwrap()).unwrap();
            assert_eq!(rest.model, full.model);
            let joined: Vec<_> = half.log.into_iter().chain(rest.log).collect();
            assert_eq!(joined, full.log);
        }
    }

    #[test]
    fn resume_rejects_mid_epoch_state() {
        let d = small();
        let t = train_reward(Method::GeRrd { k: 3 }, &d, &GeliConfig::default(), &quick(), 4).unwrap();
        let mut opt = t.optimizer.unwrap();
        opt.step_count += 1;
        let net = t.model.net().unwrap().clone();
        let r = resume_reward(Method::GeRrd { k: 3 }, &d, &GeliConfig::default(), &quick(), 4, net, opt);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn label_methods_need_labels() {
        let d = small();
        let stripped: Vec<Trajectory> = d
            .trajectories()
            .iter()
            .map(|t| {
                let steps = t
                    .steps()
                    .iter()
                    .map(|s| crate::traj::Step::new(s.state.clone(), s.action.clone(), None))
                    .collect();
                Trajectory::new(steps, t.global_return()).unwrap()
            })
            .collect();
        let d = Dataset::new(stripped, d.split()).unwrap();
        let err = train_reward(Method::GeliRrdVa, &d, &GeliConfig::default(), &quick(), 0);
        assert!(matches!(err, Err(Error::Schema(_))));
        assert!(train_reward(Method::GeRrd { k: 2 }, &d, &GeliConfig::default(), &quick(), 0).is_ok());
    }

    #[test]
    fn ge_training_reduces_decomposition_error() {
        let d = small();
        let cfg = RewardTrainConfig {
            epochs: 30,
            ..quick()
        };
        let t = train_reward(Method::GeRrd { k: 6 }, &d, &GeliConfig::default(), &cfg, 2).unwrap();
        let first = t.log.first().unwrap().l_ge_train;
        let last = t.log.last().unwrap().l_ge_train;
        assert!(last < first, "{first} -> {last}");
    }
}
