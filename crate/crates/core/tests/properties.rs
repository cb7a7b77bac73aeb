use std::collections::HashMap;

use geli_core::eval::{self, BaselineKind};
use geli_core::losses::{self, GeliConfig};
use geli_core::pipeline::{ExperimentConfig, Pipeline, RunOptions};
use geli_core::synth::{self, EnvConfig};
use geli_core::train::{self, Method, RewardTrainConfig};
use geli_core::traj::SplitTag;
use geli_core::{Dataset, Step, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mean_baseline_mse_is_population_variance_of_returns() {
    let (data, _) = synth::generate(&EnvConfig {
        num_trajectories: 37,
        seed: 12,
        ..EnvConfig::default()
    })
    .unwrap();
    let base = eval::fit_constant_baseline(&data, BaselineKind::Mean).unwrap();
    let (mse, _) = eval::eval_decomposition(&base.model(), &data).unwrap();

    let mut sum = 0.0;
    let mut n = 0.0;
    for t in data.trajectories() {
        sum += t.global_return();
        n += 1.0;
    }
    let mean = sum / n;
    let mut var = 0.0;
    for t in data.trajectories() {
        var += (t.global_return() - mean) * (t.global_return() - mean);
    }
    var /= n;
    assert!((mse - var).abs() <= 1e-12 * var, "{mse} vs {var}");
}

#[test]
fn rrd_estimator_is_unbiased() {
    let rewards: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 4.0) * 0.3).collect();
    let total: f64 = rewards.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1, 5, 19] {
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let sub = losses::sample_index_subset(rewards.len(), k, &mut rng).unwrap();
                losses::rrd_estimate(&rewards, &sub)
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - total).abs() < 3.0 * se, "k={k}: {mean} vs {total} (se {se})");
    }
}

/// Labels are a linear function of the step features, so LI can be driven to zero.
fn separable_dataset() -> Dataset {
    let trajs = (0..8)
        .map(|i| {
            let steps = (0..6)
                .map(|t| {
                    let pos = (i + t) % 3 == 0;
                    let x = if pos { 1.0 } else { 0.0 };
                    Step::new(vec![x, 1.0], vec![0.0, 0.0], Some(pos))
                })
                .collect();
            Trajectory::new(steps, 2.0).unwrap()
        })
        .collect();
    Dataset::new(trajs, SplitTag::RewardTrain).unwrap()
}

#[test]
fn li_fit_to_zero_loss_gives_unit_gap() {
    let data = separable_dataset();
    let cfg = RewardTrainConfig {
        lr: 0.05,
        epochs: 1500,
        hidden: vec![],
        weight_decay: 0.0,
        li_batch_size: 8,
        eval_every: 1500,
        ..RewardTrainConfig::default()
    };
    let trained = train::train_reward(Method::LiOnly, &data, &GeliConfig::default(), &cfg, 1).unwrap();
    let gap = eval::eval_delta_li(&trained.model, &data).unwrap();
    assert!((gap.mean_positive - 1.0).abs() < 1e-4, "{gap:?}");
    assert!(gap.mean_nonpositive.abs() < 1e-4, "{gap:?}");
    assert!((gap.delta - 1.0).abs() < 1e-4, "{gap:?}");
}

#[test]
fn converged_ge_model_beats_mean_baseline_on_train_split() {
    let (data, _) = synth::generate(&EnvConfig {
        num_trajectories: 60,
        reward_scale: 0.025,
        return_noise_sigma: 0.15,
        seed: 8,
        ..EnvConfig::default()
    })
    .unwrap();
    let cfg = RewardTrainConfig {
        lr: 1e-2,
        epochs: 3000,
        ge_batch_size: 60,
        hidden: vec![],
        weight_decay: 0.0,
        eval_every: 3000,
        ..RewardTrainConfig::default()
    };
    let base = eval::fit_constant_baseline(&data, BaselineKind::Mean).unwrap();
    let (base_mse, _) = eval::eval_decomposition(&base.model(), &data).unwrap();
    // With K = T the objective is full least squares, whose linear family contains the constant model.
    let trained = train::train_reward(Method::GeRrd { k: 20 }, &data, &GeliConfig::default(), &cfg, 2).unwrap();
    let (mse, _) = eval::eval_decomposition(&trained.model, &data).unwrap();
    assert!(mse <= base_mse, "{mse} > {base_mse}");
}

/// Empirical mutual information (nats) between the proxy label and whether `g` is above its median.
fn label_information(p: f64) -> f64 {
    let (data, truth) = synth::generate(&EnvConfig {
        num_trajectories: 200,
        proxy_accuracy: p,
        seed: 21,
        ..EnvConfig::default()
    })
    .unwrap();
    let g = truth.flat();
    let median = geli_core::stats::median(&g);
    let mut counts: HashMap<(bool, bool), f64> = HashMap::new();
    for (step, &gt) in data.steps().zip(&g) {
        *counts.entry((step.mm_label.unwrap(), gt > median)).or_default() += 1.0;
    }
    let n = g.len() as f64;
    let marginal = |f: &dyn Fn(&(bool, bool)) -> bool| {
        counts.iter().filter(|(k, _)| f(k)).map(|(_, c)| c).sum::<f64>() / n
    };
    let mut mi = 0.0;
    for (&(l, a), &c) in &counts {
        let pj = c / n;
        let pl = marginal(&|k| k.0 == l);
        let pa = marginal(&|k| k.1 == a);
        mi += pj * (pj / (pl * pa)).ln();
    }
    mi
}

#[test]
fn proxy_information_grows_with_accuracy() {
    let mi: Vec<f64> = [0.5, 0.7, 0.9].iter().map(|&p| label_information(p)).collect();
    assert!(mi[0] < mi[1] && mi[1] < mi[2], "{mi:?}");
    assert!(mi[0] < 1e-3, "{mi:?}");
}

#[test]
fn reported_gap_is_rederivable_from_step_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
        seed = 3
        methods = ["Mean", "GE_RRD_K32", "GELI_RRD_VA"]
        split = [0.5, 0.25, 0.25]
        [env]
        num_trajectories = 24
        reward_scale = 0.025
        [reward_train]
        lr = 0.001
        epochs = 2
        hidden = []
        [ppo]
        iterations = 1
        [report]
        per_step_dump = true
        "#,
    )
    .unwrap();
    cfg.paths.workdir = Some(dir.path().to_path_buf());
    let mut pipeline = Pipeline::open(cfg.clone(), RunOptions::default()).unwrap();
    pipeline.run_all().unwrap();
    let layout = pipeline.layout().clone();

    for method in &cfg.methods {
        let dump = std::fs::read_to_string(layout.step_dump(*method)).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for line in dump.lines() {
            let row: serde_json::Value = serde_json::from_str(line).unwrap();
            let r = row["r_hat"].as_f64().unwrap();
            match row["label"].as_bool() {
                Some(true) => pos.push(r),
                Some(false) => neg.push(r),
                None => {}
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(layout.eval_file(*method)).unwrap()).unwrap();
        let delta = report["delta_r_li"].as_f64().unwrap();
        let recomputed = mean(&pos) - mean(&neg);
        assert!((delta - recomputed).abs() <= 1e-12 * delta.abs().max(1e-3), "{method}: {delta} vs {recomputed}");
        assert!((report["mean_reward_positive"].as_f64().unwrap() - mean(&pos)).abs() <= 1e-12);
    }
}
