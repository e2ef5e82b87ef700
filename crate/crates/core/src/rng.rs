//! Seeded random streams.
//!
//! Every random quantity in a run comes from a ChaCha stream keyed by the
//! master seed plus a small tuple of indices (repetition, block, purpose).
//! Streams are independent of one another and of evaluation order, so
//! repetitions can run on any thread and any single block can be replayed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Activation = 1,
    Sampling = 2,
    Generation = 3,
    Topology = 4,
    Theory = 5,
    Probabilities = 6,
    Sweep = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a master seed with a key into a 64-bit child seed.
pub fn derive_seed(master: u64, purpose: Purpose, key: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0xD1B5_4A32_D192_ED03);
    h = splitmix64(h ^ purpose as u64);
    for &k in key {
        h = splitmix64(h ^ k);
    }
    h
}

/// A fresh stream for `(master, purpose, key)`.
pub fn stream(master: u64, purpose: Purpose, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, key))
}
