//! Per-trial random streams derived from a master seed.
//!
//! Every (cell, trial) pair owns an independent ChaCha8 stream, so results do
//! not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(master_seed: u64, cell: u64, trial: u64) -> u64 {
    mix(mix(mix(master_seed) ^ cell) ^ trial.rotate_left(32))
}

pub fn trial_rng(master_seed: u64, cell: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master_seed, cell, trial))
}
