//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! (master seed, purpose tag, integer parts). Streams are independent of
//! thread scheduling and of which other streams get consumed, which is what
//! makes whole runs bit-reproducible and resumable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse (seed, tag, parts) into one 64-bit stream key.
pub fn stream_key(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut h = splitmix64(&mut state);
    for &byte in tag.as_bytes() {
        state ^= u64::from(byte);
        h ^= splitmix64(&mut state);
    }
    for &p in parts {
        state ^= p;
        h ^= splitmix64(&mut state);
    }
    h
}

/// A fresh ChaCha8 generator for the given stream.
pub fn stream(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tag, parts))
}
