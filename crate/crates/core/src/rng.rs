//! Seed derivation.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` seeded from a
//! 64-bit value obtained by folding a list of tags into a base seed with the
//! splitmix64 finalizer: `s = splitmix64(s ^ splitmix64(tag))` for each tag
//! in order. The same `(base, tags)` always yields the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |s, &t| splitmix64(s ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so unrelated draws never share a stream.
pub mod tag {
    pub const GRAPH: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const DOWNSAMPLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const NEIGHBOR: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const RUN: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference splitmix64 generator seeded with 0:
        // state advances by GOLDEN before mixing.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(GOLDEN), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn tags_separate_streams() {
        assert_ne!(derive_seed(7, &[1]), derive_seed(7, &[2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
