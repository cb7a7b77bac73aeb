//! Turn-level reward network r_θ(s, a): a small MLP over concatenated
//! state and action features, its AdamW optimizer, and parameter views.

mod adamw;
mod mlp;
mod params;

pub use adamw::{AdamWConfig, AdamWState};
pub use mlp::{Activation, ForwardCache, Layer, RewardNet};
pub use params::{Gradients, ParamSet};
