//! Deterministic random streams.
//!
//! Every source of randomness in the crate is a counter-based stream keyed
//! by `(global seed, domain, a, b)`. Streams are independent of each other
//! and of execution order, so runs are bit-reproducible from the seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespaces for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init = 1,
    Dropout = 2,
    MlmMask = 3,
    ItmNegative = 4,
    DataGen = 5,
    BatchSample = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix(words: &[u64]) -> u64 {
    let mut h = 0x6a09e667f3bcc909u64;
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// A seeded ChaCha8 stream for the given key. Cheap to construct per use.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, domain as u64, a, b]))
}

/// Stable 64-bit hash of a name, used to key per-parameter init streams.
pub fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf29ce484222325u64;
    for byte in name.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
