//! Seed derivation for independent, order-free random streams.
//!
//! Every stochastic routine takes a `u64` seed and derives child seeds with
//! [`derive`], so a stream depends only on its (seed, salt...) path and never
//! on how many draws some other component consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `salts` into `seed`, one splitmix round per salt.
pub fn derive(seed: u64, salts: &[u64]) -> u64 {
    salts
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream(seed: u64, salts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, salts))
}
