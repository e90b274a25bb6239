//! Seed derivation. Every stochastic choice in the crate (initialization,
//! shuffling, masking, dropout, synthetic data) draws from a ChaCha stream
//! whose seed is derived from a base seed plus a few integers, so runs are
//! reproducible and resumable from `(seed, epoch, step)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a tag path into a new independent seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(base: u64, parts: &[u64]) -> Rng {
    seeded(derive_seed(base, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a: u64 = derived(7, &[1, 2]).random();
        let b: u64 = derived(7, &[1, 2]).random();
        let c: u64 = derived(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
