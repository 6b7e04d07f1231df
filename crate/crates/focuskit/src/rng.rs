//! Deterministic seed derivation and RNG construction.
//!
//! Every random decision in the crate flows from a single u64 seed through
//! [`derive_seed`], so independent streams (per patient, per resample, per
//! stage) can be drawn in any order without affecting each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed for stream `index` from a base seed.
///
/// Two splitmix rounds over the golden-ratio-offset index keep children
/// decorrelated even for adjacent indices.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(index))
}

/// Seeded ChaCha8 generator; deterministic across platforms.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
