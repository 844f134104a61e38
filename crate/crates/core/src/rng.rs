//! Seed derivation shared by the integrator, the samplers and the ensemble
//! runners.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed and a
//! 64-bit stream number, so draws are reproducible from `(seed, stream)` alone
//! and independent of thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Key mixed into the seed for streams that refine a step (Brownian bridges).
const BRIDGE_KEY: u64 = 0x6272_6964_6765_0001;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed number `index` of `master`; used for per-trajectory and
/// per-chain seeds.
pub fn split_seed(master: u64, index: u64) -> u64 {
    stream(master, index).next_u64()
}

/// Generator for the bridge refinements of step `step` of the run seeded by
/// `seed`.
pub fn bridge_stream(seed: u64, step: u64) -> ChaCha8Rng {
    stream(seed ^ BRIDGE_KEY, step)
}
