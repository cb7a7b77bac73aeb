mod common;

use geli_core::eval;
use geli_core::losses::{self, IndexSubset, IrcrNormalization};
use geli_core::policy::{self, PolicyParams, PpoConfig, ReferencePolicy, RolloutRecord};
use geli_core::reward_net::ParamSet;
use geli_core::traj::{self, FeatureSpec, SplitTag};
use geli_core::{AdamWState, Dataset, RewardModel, Step, Trajectory};
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

fn reward_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 1usize..12).prop_flat_map(|(n, t)| {
        (
            prop::collection::vec(prop::collection::vec(finite(-3.0, 3.0), t), n),
            prop::collection::vec(finite(-10.0, 10.0), n),
        )
    })
}

fn policy_params(actions: usize, dim: usize) -> impl Strategy<Value = PolicyParams> {
    (
        prop::collection::vec(finite(-2.0, 2.0), actions * dim),
        prop::collection::vec(finite(-2.0, 2.0), actions),
    )
        .prop_map(move |(w, b)| PolicyParams::from_parts(actions, dim, w, b).unwrap())
}

fn states(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(finite(-2.0, 2.0), dim), 1..6)
}

fn labeled_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(
        (
            prop::collection::vec((finite(-1.0, 1.0), any::<bool>()), 1..6),
            finite(-5.0, 5.0),
        ),
        2..8,
    )
    .prop_map(|rows| {
        let trajs = rows
            .into_iter()
            .map(|(steps, ret)| {
                let steps = steps
                    .into_iter()
                    .map(|(x, l)| Step::new(vec![x, 1.0], vec![-x, 0.5], Some(l)))
                    .collect();
                Trajectory::new(steps, ret).unwrap()
            })
            .collect();
        Dataset::new(trajs, SplitTag::Full).unwrap()
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rrd_with_full_subsets_equals_ge((rewards, returns) in reward_rows()) {
        let full: Vec<IndexSubset> = rewards.iter().map(|r| IndexSubset::full(r.len())).collect();
        let ge = losses::loss_ge(&rewards, &returns).unwrap();
        let rrd = losses::loss_rrd_with_subsets(&rewards, &returns, &full).unwrap();
        prop_assert!(close(rrd, ge, 1e-12), "{rrd} vs {ge}");
    }

    #[test]
    fn loss_geli_is_linear_in_lambda(ge in finite(0.0, 50.0), li in finite(0.0, 50.0), lambda in 0.0f64..=1.0) {
        prop_assert_eq!(losses::loss_geli(ge, li, 1.0).unwrap(), ge);
        prop_assert_eq!(losses::loss_geli(ge, li, 0.0).unwrap(), li);
        let mid = losses::loss_geli(ge, li, lambda).unwrap();
        prop_assert!(close(mid, li + lambda * (ge - li), 1e-12));
    }

    #[test]
    fn rudder_credits_telescope(preds in prop::collection::vec(finite(-100.0, 100.0), 2..40)) {
        let credit = losses::rudder_credit(&preds).unwrap();
        prop_assert_eq!(credit.len(), preds.len() - 1);
        let total: f64 = credit.iter().sum();
        let expect = preds[preds.len() - 1] - preds[0];
        prop_assert!((total - expect).abs() <= 1e-12 * 100.0 * preds.len() as f64);
        // Each prefix is reconstructed from the first prediction plus the credits so far.
        let mut acc = preds[0];
        for (c, p) in credit.iter().zip(&preds[1..]) {
            acc += c;
            prop_assert!((acc - p).abs() <= 1e-10);
        }
    }

    #[test]
    fn ircr_targets_lie_in_unit_interval_and_are_constant(ds in labeled_dataset()) {
        let returns: Vec<f64> = ds.trajectories().iter().map(|t| t.global_return()).collect();
        prop_assume!(returns.iter().any(|&r| r != returns[0]));
        let proxy = losses::ircr_proxy(&ds, IrcrNormalization::MinMax).unwrap();
        for (row, t) in proxy.iter().zip(ds.trajectories()) {
            prop_assert_eq!(row.len(), t.horizon());
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(row.iter().all(|&v| v == row[0]));
        }
        let flat: Vec<f64> = proxy.iter().map(|r| r[0]).collect();
        prop_assert!(flat.contains(&0.0) && flat.contains(&1.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(p in policy_params(4, 3), q in policy_params(4, 3), s in states(3)) {
        let refq = ReferencePolicy::freeze(&q);
        let kl = policy::kl_divergence(&p, &refq, &s).unwrap();
        prop_assert!(kl >= 0.0 && kl.is_finite());
        prop_assert_eq!(policy::kl_divergence(&p, &ReferencePolicy::freeze(&p), &s).unwrap(), 0.0);
    }

    #[test]
    fn ppo_at_reference_with_zero_advantage_is_noop(
        p in policy_params(5, 3),
        s in states(3),
        reward in finite(-3.0, 3.0),
        score_norm in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = PpoConfig { lr: 1e-2, use_score_norm: score_norm, ..PpoConfig::default() };
        let reference = ReferencePolicy::freeze(&p);
        let mut rng = geli_core::rng::stream(seed, &[]);
        let batch: Vec<RolloutRecord> = policy::rollout(&p, &s, &mut rng).unwrap();
        let rewards = vec![reward; batch.len()];
        let mut params = p.clone();
        let mut opt = AdamWState::new(cfg.optimizer(), &params);
        let stats = policy::ppo_update(&mut params, &reference, &mut opt, &batch, &rewards, &cfg).unwrap();
        for (a, b) in params.tensors().iter().zip(p.tensors()) {
            prop_assert_eq!(*a, b);
        }
        prop_assert_eq!(stats.kl, 0.0);
        prop_assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn ppo_reports_valid_clip_fraction_and_kl(
        p in policy_params(4, 2),
        s in states(2),
        rewards_seed in any::<u64>(),
        lr in 1e-3f64..1.0,
    ) {
        let cfg = PpoConfig { lr, ..PpoConfig::default() };
        let reference = ReferencePolicy::freeze(&p);
        let mut rng = geli_core::rng::stream(rewards_seed, &[]);
        let batch = policy::rollout(&p, &s, &mut rng).unwrap();
        let rewards: Vec<f64> = batch.iter().map(|r| (r.action as f64 - 1.5) * 0.7).collect();
        let mut params = p.clone();
        let mut opt = AdamWState::new(cfg.optimizer(), &params);
        let stats = policy::ppo_update(&mut params, &reference, &mut opt, &batch, &rewards, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&stats.clip_fraction));
        prop_assert!(stats.kl >= 0.0 && stats.kl.is_finite());
    }

    #[test]
    fn score_normalized_advantages_are_standardized(r in prop::collection::vec(finite(-50.0, 50.0), 2..40)) {
        prop_assume!(r.iter().any(|&x| (x - r[0]).abs() > 1e-6));
        let a = policy::advantages(&r, true);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
        prop_assert!((var - 1.0).abs() < 1e-9, "var {var}");
    }

    #[test]
    fn metrics_ignore_trajectory_order(ds in labeled_dataset(), w in finite(-1.0, 1.0), rot in 0usize..8) {
        let net = geli_core::RewardNet::from_layers(
            vec![geli_core::reward_net::Layer {
                in_dim: 4, out_dim: 1, weights: vec![w, 0.2, -0.3, 0.1], bias: vec![0.05],
            }],
            geli_core::Activation::Tanh,
        ).unwrap();
        let model = RewardModel::Net(net);
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.rotate_left(rot % ds.len());
        idx.reverse();
        let shuffled = ds.subset(&idx, SplitTag::Full).unwrap();
        let (m1, a1) = eval::eval_decomposition(&model, &ds).unwrap();
        let (m2, a2) = eval::eval_decomposition(&model, &shuffled).unwrap();
        prop_assert!(close(m1, m2, 1e-12) && close(a1, a2, 1e-12));
        match (eval::eval_delta_li(&model, &ds), eval::eval_delta_li(&model, &shuffled)) {
            (Ok(g1), Ok(g2)) => prop_assert!(close(g1.delta, g2.delta, 1e-12)),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn hashed_features_have_unit_or_zero_norm(text in "[a-z ]{0,40}", dim in 1usize..64, seed in any::<u64>()) {
        let v = traj::hash_featurize(&text, &FeatureSpec::hashed(dim, seed)).unwrap();
        prop_assert_eq!(v.len(), dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12, "norm {norm}");
        prop_assert_eq!(norm == 0.0, text.split_whitespace().next().is_none());
    }

    #[test]
    fn splits_partition_the_indices(n in 3usize..300, a in 0.05f64..0.8, seed in any::<u64>()) {
        let b = (1.0 - a) / 2.0;
        let sizes = [(a * n as f64).round() as usize, (b * n as f64).round() as usize];
        let feasible = sizes[0] > 0 && sizes[1] > 0 && sizes[0] + sizes[1] < n;
        let parts = match traj::split_indices(n, [a, b, 1.0 - a - b], seed) {
            Ok(parts) => parts,
            Err(e) => {
                prop_assert!(!feasible, "{e}");
                return Ok(());
            }
        };
        prop_assert!(feasible);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact(ds in labeled_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        traj::write_jsonl(&ds, &path).unwrap();
        let back = traj::load_jsonl(&path, &FeatureSpec::precomputed(2)).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        for (x, y) in ds.trajectories().iter().zip(back.trajectories()) {
            prop_assert_eq!(x.global_return().to_bits(), y.global_return().to_bits());
            for (s, t) in x.steps().iter().zip(y.steps()) {
                prop_assert!(s.state.iter().zip(&t.state).all(|(a, b)| a.to_bits() == b.to_bits()));
                prop_assert!(s.action.iter().zip(&t.action).all(|(a, b)| a.to_bits() == b.to_bits()));
                prop_assert_eq!(s.mm_label, t.mm_label);
            }
        }
    }
}
