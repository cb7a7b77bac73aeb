//! Calibration run for policy adaptation: trains the GELI reward on the
//! reward split, adapts a policy against it and against the true reward, and
//! prints the exact expected true return of each policy on held-out states.
//!
//! Usage: `cargo run --release -p geli-core --example policy_pilot -- [key=value ...]`
//! Keys: seed, p, scale, sigma, lambda, lr, epochs, plr, iters, bs, kl, actions.

use std::collections::HashMap;

use geli_core::policy::{self, PolicyParams, PpoConfig};
use geli_core::synth::{self, EnvConfig};
use geli_core::train::{self, Method, RewardTrainConfig};
use geli_core::traj::{split_indices, SplitTag};
use geli_core::GeliConfig;

type RewardFn<'a> = Box<dyn FnMut(&[f64], usize) -> geli_core::Result<f64> + 'a>;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(Ok(d), |v| v.parse::<f64>());

    let seed = get("seed", 42.0)? as u64;
    let env = EnvConfig {
        proxy_accuracy: get("p", 0.9)?,
        reward_scale: get("scale", 0.025)?,
        return_noise_sigma: get("sigma", 0.15)?,
        seed,
        ..EnvConfig::default()
    };
    let cfg = RewardTrainConfig {
        lr: get("lr", 1e-4)?,
        epochs: get("epochs", 1000.0)? as usize,
        hidden: vec![],
        eval_every: 100_000,
        ..RewardTrainConfig::default()
    };
    let geli = GeliConfig {
        lambda: get("lambda", 0.3)?,
        ..GeliConfig::default()
    };
    let ppo = PpoConfig {
        lr: get("plr", 1.4e-5)?,
        iterations: get("iters", 200.0)? as usize,
        batch_size: get("bs", 24.0)? as usize,
        kl_coeff: get("kl", 0.05)?,
        num_actions: get("actions", 16.0)? as usize,
        seed,
        ..PpoConfig::default()
    };

    let (data, _) = synth::generate(&env)?;
    let [tr, _, pol] = split_indices(data.len(), [5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0], seed)?;
    let train_ds = data.subset(&tr, SplitTag::RewardTrain)?;
    let pool: Vec<Vec<f64>> = data
        .subset(&pol, SplitTag::PolicyTrain)?
        .steps()
        .map(|s| s.state.clone())
        .collect();
    let vocab = synth::generate_vocabulary(&env, ppo.num_actions, seed ^ 0xAC71)?;
    let eval_states = synth::generate_states(&env, 200, seed ^ 0xE7A1)?;

    let reference = PolicyParams::uniform(ppo.num_actions, env.feature_dim);
    let base = policy::expected_return(&reference, &eval_states, &vocab.true_rewards)?;
    let best = vocab.true_rewards.iter().copied().fold(f64::MIN, f64::max) * env.horizon as f64;
    println!("reference {base:.5}  best {best:.5}");

    let trained = train::train_reward(Method::GeliRrdVa, &train_ds, &geli, &cfg, seed)?;
    let runs: [(&str, RewardFn); 2] = [
        ("oracle", Box::new(policy::oracle_reward(&vocab))),
        ("geli", Box::new(policy::model_reward(&trained.model, &vocab))),
    ];
    for (name, reward) in runs {
        let (adapted, _, log) = policy::adapt_policy(reward, &vocab, &pool, &ppo, true)?;
        let ret = policy::expected_return(&adapted, &eval_states, &vocab.true_rewards)?;
        let kls: Vec<f64> = log.iter().map(|e| e.kl).collect();
        let max_kl = kls.iter().copied().fold(0.0, f64::max);
        println!(
            "{name:<7} return {ret:.5}  gain {:+.5}  final kl {:.5}  max kl {max_kl:.5}",
            ret - base,
            kls.last().copied().unwrap_or(0.0)
        );
    }
    Ok(())
}
