//! Seeded random-number streams. All randomness in a run flows from one root
//! seed; each consumer gets its own ChaCha stream so that adding draws in one
//! place never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization.
pub const STREAM_INIT: u64 = 1;
/// Sampling targets from the model predictive distribution.
pub const STREAM_TARGETS: u64 = 2;
/// Shuffling the training set between epochs.
pub const STREAM_SHUFFLE: u64 = 3;
/// Synthetic dataset generation.
pub const STREAM_DATA: u64 = 4;

/// Returns the RNG for `stream` derived from the root `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
