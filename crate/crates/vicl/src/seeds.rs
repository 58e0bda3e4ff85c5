//! Seed derivation.
//!
//! Every run owns a single root seed; each stage (data generation, parameter
//! init, batch order, sampling, probing) draws from its own named substream so
//! that stages stay reproducible independently of one another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive the 64-bit seed of a named substream.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name.as_bytes()))
}

/// RNG for a named substream of `root`.
pub fn rng_for(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

/// Seed of the `idx`-th element of a named substream (e.g. one clip, one
/// query), independent of all other elements.
pub fn indexed_seed(root: u64, name: &str, idx: u64) -> u64 {
    splitmix64(derive_seed(root, name) ^ splitmix64(idx))
}

/// RNG for the `idx`-th element of a named substream.
pub fn rng_for_indexed(root: u64, name: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(indexed_seed(root, name, idx))
}
