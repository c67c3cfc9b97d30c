//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! (base seed, stream tag) pair, so independent components — class centers,
//! episode sampling, parameter init, per-iteration draws — never share a
//! stream and every run is a pure function of its configured seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed; changing them changes
/// every derived stream.
pub mod stream {
    pub const ENCODER_INIT: u64 = 0x01;
    pub const HYPERNET_INIT: u64 = 0x02;
    pub const KERNEL_INIT: u64 = 0x03;
    pub const EPISODE: u64 = 0x10;
    pub const CLASS_CENTER: u64 = 0x20;
    pub const TRAIN_EPISODE: u64 = 0x30;
    pub const EVAL_EPISODE: u64 = 0x40;
    pub const EVAL_SOURCE: u64 = 0x50;
}

/// Mixes `(seed, a)` into a single well-spread 64-bit key (splitmix64).
pub fn derive_seed(seed: u64, a: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 generator for the given (seed, stream) pair.
pub fn seed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let draw = |seed, stream| -> Vec<u64> {
            let mut rng = seed_rng(seed, stream);
            (0..4).map(|_| rng.gen()).collect()
        };
        assert_eq!(draw(7, 1), draw(7, 1));
        assert_ne!(draw(7, 1), draw(7, 2));
        assert_ne!(draw(7, 1), draw(8, 1));
    }
}
