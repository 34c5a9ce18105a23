//! Explicit, replayable randomness.
//!
//! Every consumer of randomness owns a [`SeedStream`]. A stream is a base seed
//! plus a counter; two streams with the same seed and counter produce the same
//! draws no matter which thread or process consumes them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
    pub counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Returns a generator for the current position and advances the counter.
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = self.rng_at(self.counter);
        self.counter += 1;
        rng
    }

    pub fn rng_at(&self, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(counter);
        rng
    }

    /// An independent child stream, e.g. one per worker or per component.
    pub fn fork(&self, label: u64) -> SeedStream {
        SeedStream::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x5851_f42d))))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
