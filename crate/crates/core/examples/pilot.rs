//! Calibration run for the synthetic comparison: trains every method of the
//! grid on a 500/50 split and prints test metrics.
//!
//! Usage: `cargo run --release -p geli-core --example pilot -- [key=value ...]`
//! Keys: seed, p, scale, sigma, noise, lr, epochs, lambda, k, ge_bs, li_bs, hidden, depth, wd,
//! methods (comma-separated report tags).

use std::collections::HashMap;
use std::time::Instant;

use geli_core::eval;
use geli_core::synth::{self, EnvConfig};
use geli_core::train::{self, Method, RewardTrainConfig};
use geli_core::traj::{split_indices, SplitTag};
use geli_core::GeliConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(Ok(d), |v| v.parse::<f64>());

    let seed = get("seed", 42.0)? as u64;
    let env = EnvConfig {
        num_trajectories: 600,
        proxy_accuracy: get("p", 0.9)?,
        reward_scale: get("scale", 1.0)?,
        return_noise_sigma: get("sigma", 0.0)?,
        feature_noise: get("noise", 0.5)?,
        seed,
        ..EnvConfig::default()
    };
    let width = get("hidden", 64.0)? as usize;
    let depth = get("depth", 2.0)? as usize;
    let cfg = RewardTrainConfig {
        lr: get("lr", 1e-3)?,
        epochs: get("epochs", 10.0)? as usize,
        ge_batch_size: get("ge_bs", 1.0)? as usize,
        li_batch_size: get("li_bs", 32.0)? as usize,
        hidden: vec![width; depth],
        eval_every: 1000,
        weight_decay: get("wd", 0.01)?,
        ..RewardTrainConfig::default()
    };
    let geli = GeliConfig {
        lambda: get("lambda", 0.5)?,
        rrd_k: Some(get("k", 32.0)? as usize),
        rng_seed: 0,
    };

    let (data, truth) = synth::generate(&env)?;
    let [tr, te, _] = split_indices(data.len(), [5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0], seed)?;
    let train_ds = data.subset(&tr, SplitTag::RewardTrain)?;
    let test_ds = data.subset(&te, SplitTag::RewardTest)?;
    let test_truth = truth.subset(&te);

    println!("{env:?}\n{cfg:?}\n{geli:?}");
    println!(
        "{:<14} {:>10} {:>10} {:>10} {:>9} {:>8} {:>7}",
        "method", "train_mse", "mse", "mae", "delta", "pearson", "secs"
    );
    let methods: Vec<Method> = match args.get("methods") {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => Method::default_grid(),
    };
    for method in methods {
        let t0 = Instant::now();
        let trained = train::train_reward(method, &train_ds, &geli, &cfg, seed)?;
        let rep = eval::evaluate(&trained.model, &test_ds, Some(&test_truth), &method.tag())?;
        println!(
            "{:<14} {:>10.5} {:>10.5} {:>10.5} {:>9.4} {:>8.4} {:>7.2}",
            rep.method_tag,
            trained.log.last().map_or(f64::NAN, |e| e.l_ge_train),
            rep.l_ge_mse,
            rep.l_ge_mae,
            rep.delta_r_li,
            rep.oracle.map_or(f64::NAN, |o| o.pearson_r),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
