//! Seeded random-number streams.
//!
//! All randomness in the crate flows from a single 64-bit experiment seed.
//! Each consumer derives its own named stream so that changing one stage
//! (say, the k-means refit schedule) never perturbs the draws seen by
//! another (say, the data generator).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, fixed here so stream derivation is identical on every platform.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the RNG for a named stream of the experiment seed.
///
/// The same `(seed, name)` pair always yields the same generator.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

/// Convenience for streams indexed by a counter (epoch, cycle, ...).
pub fn indexed_stream_rng(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}

/// A derived 64-bit seed for components that take seeds rather than
/// generators.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name.as_bytes())) ^ index)
}
