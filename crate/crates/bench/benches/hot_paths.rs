use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use geli_core::objective::{self, Objective};
use geli_core::policy::{self, PolicyParams, PpoConfig, ReferencePolicy};
use geli_core::reward_net::{ForwardCache, Gradients};
use geli_core::synth::{self, EnvConfig};
use geli_core::{Activation, AdamWState, RewardNet, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn env() -> EnvConfig {
    EnvConfig {
        num_trajectories: 64,
        seed: 3,
        ..EnvConfig::default()
    }
}

fn reward_net(c: &mut Criterion) {
    let cfg = env();
    let (data, _) = synth::generate(&cfg).unwrap();
    let step = &data.trajectories()[0].steps()[0];
    let x: Vec<f64> = step.state.iter().chain(&step.action).copied().collect();
    let net = RewardNet::new(x.len(), &[64, 64], Activation::Tanh, 1);

    c.bench_function("forward_64x64", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("forward_backward_64x64", |b| {
        let mut cache = ForwardCache::default();
        let mut grads = Gradients::zeros_like(&net);
        b.iter(|| {
            net.forward_cached(black_box(&x), &mut cache).unwrap();
            net.backward(&cache, 1.0, &mut grads);
        })
    });
}

fn loss_gradient(c: &mut Criterion) {
    let cfg = env();
    let (data, _) = synth::generate(&cfg).unwrap();
    let batch: Vec<&Trajectory> = data.trajectories()[..32].iter().collect();
    let dim = 2 * cfg.feature_dim;
    let net = RewardNet::new(dim, &[64, 64], Activation::Tanh, 1);
    let objectives = [
        ("ge", Objective::Ge),
        ("rrd_k8", Objective::Rrd { k: 8 }),
        ("li", Objective::Li),
        ("geli", Objective::Geli { lambda: 0.5, k: Some(8) }),
        ("rudder_return", Objective::RudderReturn),
    ];
    let mut group = c.benchmark_group("loss_gradient_batch32");
    for (name, obj) in objectives {
        group.bench_function(name, |b| {
            b.iter(|| objective::loss_gradient(&net, black_box(&batch), &obj, 7, 0).unwrap())
        });
    }
    group.finish();
}

fn ppo_update(c: &mut Criterion) {
    let cfg = env();
    let ppo = PpoConfig {
        lr: 1e-3,
        batch_size: 24,
        ..PpoConfig::default()
    };
    let vocab = synth::generate_vocabulary(&cfg, ppo.num_actions, 5).unwrap();
    let states: Vec<Vec<f64>> = synth::generate_states(&cfg, 2, 6)
        .unwrap()
        .into_iter()
        .flatten()
        .take(ppo.batch_size)
        .collect();
    let start = PolicyParams::uniform(ppo.num_actions, cfg.feature_dim);
    let reference = ReferencePolicy::freeze(&start);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = policy::rollout(&start, &states, &mut rng).unwrap();
    let rewards: Vec<f64> = batch.iter().map(|r| vocab.true_rewards[r.action]).collect();

    c.bench_function("ppo_update_batch24", |b| {
        b.iter_batched(
            || (start.clone(), AdamWState::new(ppo.optimizer(), &start)),
            |(mut params, mut opt)| {
                policy::ppo_update(&mut params, &reference, &mut opt, &batch, &rewards, &ppo).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, reward_net, loss_gradient, ppo_update);
criterion_main!(benches);
