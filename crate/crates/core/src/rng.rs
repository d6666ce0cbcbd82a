//! Deterministic seed splitting.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from one
//! root seed, so adding a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the consumers of a root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_SPLIT: u64 = 2;
    pub const VAL_SPLIT: u64 = 3;
    pub const TEST_SPLIT: u64 = 4;
    pub const LABEL_MASK: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const ORACLE: u64 = 7;
    /// Epoch `e` of training uses `EPOCH_BASE + e`.
    pub const EPOCH_BASE: u64 = 1 << 32;
}

/// RNG for stream `stream` of root seed `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
