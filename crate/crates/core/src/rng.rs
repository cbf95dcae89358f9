//! Seed derivation. Every random stream in an experiment is a ChaCha8
//! generator keyed by the experiment seed plus a path of stream labels, so
//! any component can be re-run in isolation and reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`; distinct paths give unrelated streams.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels used across the crate.
pub mod label {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DETECT: u64 = 3;
    pub const REFERENCE: u64 = 4;
    pub const TRANSFER: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SEQUENCE: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(5, &[1, 2]).random();
        let b: u64 = stream(5, &[1, 2]).random();
        let c: u64 = stream(5, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
