//! Turn-level credit assignment from session-level returns.
//!
//! The crate learns a per-step reward function whose per-trajectory sums
//! reconstruct a single episodic return (least-squares and randomized return
//! decomposition), optionally shaped by binary per-step proxy labels, and then
//! uses the learned reward to adapt a softmax policy with a clipped surrogate
//! objective anchored to a frozen reference by a KL penalty.
//!
//! Module map:
//! - [`traj`]: trajectories, JSONL ingestion, hashing featurizer, splits
//! - [`reward_net`], [`objective`], [`checkpoint`]: the reward model and its training losses
//! - [`losses`]: decomposition/shaping losses and the IRCR and RUDDER baselines
//! - [`synth`]: synthetic delayed-reward generator with ground-truth step rewards
//! - [`policy`]: softmax policy, KL anchor and PPO updates
//! - [`eval`]: decomposition error, conditional reward gap, constant baselines, reports
//! - [`pipeline`]: configuration, manifests and the staged experiment runner

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod reward_net;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;
pub mod traj;

pub use error::{Error, Result};
pub use losses::GeliConfig;
pub use model::RewardModel;
pub use reward_net::{Activation, AdamWConfig, AdamWState, RewardNet};
pub use traj::{Dataset, FeatureSpec, Step, Trajectory};
