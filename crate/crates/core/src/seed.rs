//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a base
//! seed plus a short path of stream labels, so that independent jobs (one
//! experiment arm, one epoch shuffle) never share state and results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable consulted by the CLI for a default seed.
pub const SEED_ENV: &str = "GAZECAL_SEED";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with a path of stream labels into a new 64-bit seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &label| {
        splitmix64(acc ^ splitmix64(label))
    })
}

/// A generator for the stream `path` under `base`.
pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// A stable 64-bit label for a string (FNV-1a).
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Stream labels used across the crate.
pub mod stream {
    pub const PREPARE: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const GRADCHECK: u64 = 6;
    pub const EXPERIMENT: u64 = 7;
    pub const SYNTH_PERSON: u64 = 8;
}
