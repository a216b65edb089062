//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit seed or stream. Independent
//! sub-streams are derived from a parent seed and a textual tag so that
//! adding a new consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by `(seed, tag)`.
pub fn substream(seed: u64, tag: &str) -> Stream {
    stream(derive_seed(seed, tag))
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = fnv1a(tag.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// `n` draws from `N(0, sigma^2)`.
pub fn normal_vec(rng: &mut Stream, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * sigma
        })
        .collect()
}
