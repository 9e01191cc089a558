//! Seeded random streams.
//!
//! Every stochastic component draws from its own [`SimRng`] derived from a
//! base seed and a stream tag, so that adding a consumer never perturbs the
//! draws of another.

use rand::SeedableRng;

pub type SimRng = rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(mix64(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(base: u64, stream: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, stream))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
