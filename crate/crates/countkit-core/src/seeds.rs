//! Deterministic seed derivation.
//!
//! All randomness in the toolkit flows from a single root seed through named
//! sub-streams (corpus generation, mixing, weight init, shuffling, ...) so that
//! components can be re-seeded independently and parallel execution stays
//! bit-identical to serial execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed of a named sub-stream from a root seed.
pub fn substream(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a(name.as_bytes()))
}

/// Derive the seed of the `n`-th element of a named sub-stream.
pub fn substream_n(root: u64, name: &str, n: u64) -> u64 {
    splitmix64(substream(root, name).wrapping_add(splitmix64(n)))
}

/// A deterministic RNG for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
