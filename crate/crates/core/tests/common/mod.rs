//! Independent loss oracles and finite-difference helpers shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use geli_core::losses::{self, IndexSubset};
use geli_core::objective::{self, Objective};
use geli_core::reward_net::{Gradients, ParamSet};
use geli_core::{Activation, RewardNet, Step, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Random labeled trajectories with Gaussian-ish features and returns.
pub fn random_batch(seed: u64, n: usize, horizon: usize, dim: usize) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let steps = (0..horizon)
                .map(|_| {
                    let s = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let a = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let label = match rng.random_range(0..3) {
                        0 => None,
                        1 => Some(false),
                        _ => Some(true),
                    };
                    Step::new(s, a, label)
                })
                .collect();
            Trajectory::new(steps, rng.random_range(-2.0..2.0)).unwrap()
        })
        .collect()
}

pub fn random_net(seed: u64, dim: usize) -> RewardNet {
    RewardNet::new(2 * dim, &[5, 4], Activation::Tanh, seed)
}

fn step_rewards(net: &RewardNet, t: &Trajectory) -> Vec<f64> {
    t.steps().iter().map(|s| net.reward_step(s).unwrap()).collect()
}

/// Loss recomputed from plain forward passes and the reference loss functions.
pub fn oracle_loss(net: &RewardNet, batch: &[&Trajectory], obj: &Objective, seed: u64, salt: u64) -> f64 {
    let rewards: Vec<Vec<f64>> = batch.iter().map(|t| step_rewards(net, t)).collect();
    let returns: Vec<f64> = batch.iter().map(|t| t.global_return()).collect();
    let subsets = |k: usize| -> Vec<IndexSubset> { objective::rrd_subsets(batch, k, seed, salt).unwrap() };
    let li = || {
        let (mut r, mut l) = (Vec::new(), Vec::new());
        for (t, rs) in batch.iter().zip(&rewards) {
            for (s, &x) in t.steps().iter().zip(rs) {
                if let Some(label) = s.mm_label {
                    r.push(x);
                    l.push(label);
                }
            }
        }
        losses::loss_li(&r, &l).unwrap()
    };
    match *obj {
        Objective::Ge => losses::loss_ge(&rewards, &returns).unwrap(),
        Objective::Rrd { k } => losses::loss_rrd_with_subsets(&rewards, &returns, &subsets(k)).unwrap(),
        Objective::Li => li(),
        Objective::Geli { lambda, k } => {
            let ge = match k {
                Some(k) => losses::loss_rrd_with_subsets(&rewards, &returns, &subsets(k)).unwrap(),
                None => losses::loss_ge(&rewards, &returns).unwrap(),
            };
            losses::loss_geli(ge, li(), lambda).unwrap()
        }
        Objective::RudderReturn => {
            // Squared return error of the prediction from every prefix mean, including the empty prefix.
            let mut total = 0.0;
            for t in batch {
                let dim = 2 * t.feature_dim();
                let mut preds = vec![net.forward(&vec![0.0; dim]).unwrap()];
                for end in 1..=t.horizon() {
                    let mut x = vec![0.0; dim];
                    for s in &t.steps()[..end] {
                        for (acc, v) in x.iter_mut().zip(s.state.iter().chain(&s.action)) {
                            *acc += v / end as f64;
                        }
                    }
                    preds.push(net.forward(&x).unwrap());
                }
                let m = preds.len() as f64;
                total += preds.iter().map(|p| (t.global_return() - p).powi(2)).sum::<f64>() / m;
            }
            total / batch.len() as f64
        }
        Objective::Ircr(_) => unimplemented!("not covered by the oracle"),
    }
}

/// Central differences of [`oracle_loss`] for every parameter.
pub fn numeric_gradient(net: &RewardNet, batch: &[&Trajectory], obj: &Objective, seed: u64, salt: u64) -> Vec<f64> {
    let mut probe = net.clone();
    let shapes = probe.shapes();
    let mut out = Vec::new();
    for (ti, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + FD_STEP;
            let up = oracle_loss(&probe, batch, obj, seed, salt);
            probe.tensors_mut()[ti][j] = orig - FD_STEP;
            let down = oracle_loss(&probe, batch, obj, seed, salt);
            probe.tensors_mut()[ti][j] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all entries.
pub fn max_relative_error(analytic: &Gradients, numeric: &[f64]) -> f64 {
    let a: Vec<f64> = analytic.flat().collect();
    assert_eq!(a.len(), numeric.len());
    a.iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// The losses covered by the gradient check, with subset size 3 where RRD applies.
pub fn checked_objectives() -> Vec<(&'static str, Objective)> {
    vec![
        ("GE", Objective::Ge),
        ("RRD", Objective::Rrd { k: 3 }),
        ("LI", Objective::Li),
        ("GELI", Objective::Geli { lambda: 0.4, k: Some(3) }),
        ("RUDDER-return", Objective::RudderReturn),
    ]
}

/// Worst relative error of the analytic gradient for one objective and seed.
pub fn gradient_check(obj: &Objective, seed: u64) -> f64 {
    let dim = 3;
    let trajs = random_batch(seed, 4, 6, dim);
    let batch: Vec<&Trajectory> = trajs.iter().collect();
    let net = random_net(seed ^ 0x5eed, dim);
    let (loss, grads) = objective::loss_gradient(&net, &batch, obj, seed, 11).unwrap();
    let oracle = oracle_loss(&net, &batch, obj, seed, 11);
    assert!(
        (loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
        "loss {loss} vs oracle {oracle}"
    );
    max_relative_error(&grads, &numeric_gradient(&net, &batch, obj, seed, 11))
}
