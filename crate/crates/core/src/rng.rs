//! Seed derivation. Every random stream in the pipeline is a ChaCha8 generator
//! keyed by a 64-bit seed derived from a parent seed and a path of integers,
//! so per-item results do not depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a seed and a path of integers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, path))
}
