//! Counter-based random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the master
//! seed plus a tuple of integers (seed index, instance, step, purpose). The
//! result does not depend on which worker evaluates a cell or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags mixed into stream keys.
pub mod purpose {
    pub const GENERATE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const COUNTERFACTUAL: u64 = 4;
    pub const PAC: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
    pub const UNCONSTRAINED: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a single 64-bit key.
pub fn mix(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(mix(master, parts))
}
