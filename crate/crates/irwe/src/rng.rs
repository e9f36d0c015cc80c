//! Deterministic seed derivation.
//!
//! All randomness in a run flows from a single `u64` seed. Child streams are
//! derived by a fixed FNV-1a hash of `(seed, purpose, index)` so that per-node
//! work can run in parallel in any order and still reproduce bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable child seed for a `(seed, purpose, index)` triple.
pub fn child_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    h = fnv1a(h, purpose.as_bytes());
    h = fnv1a(h, &index.to_le_bytes());
    // splitmix64 finalizer to decorrelate nearby indices
    let mut z = h.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for a derived stream.
pub fn child_rng(seed: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(child_seed(seed, purpose, index))
}
