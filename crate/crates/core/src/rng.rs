//! Seeding. All randomness is drawn from ChaCha8 streams derived from one
//! user seed, so results are identical across platforms.
//!
//! Each consumer uses its own stream number so adding draws in one place never
//! shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const TASK: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const INSTANCES: u64 = 4;
}

/// Generator for `stream` under `seed`.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
