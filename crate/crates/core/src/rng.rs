//! Deterministic random streams.
//!
//! Every random draw in the simulator comes from a [`Stream`] identified by a
//! run seed, a purpose tag and a small tuple of integers (step, prompt id,
//! attempt, ...). Streams with different keys are statistically independent,
//! so results never depend on the order in which prompts are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used throughout the crate.
pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct tags never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Rollout = 2,
    Teacher = 3,
    Batch = 4,
    Eval = 5,
    Split = 6,
    Probe = 7,
    Validation = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `seed`, `purpose` and `keys` into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, purpose: Purpose, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5352_545F_5349_4D00);
    h = splitmix64(h ^ purpose as u64);
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, purpose, keys))
}
