//! Counter-addressed Gaussian streams.
//!
//! Draws for `(seed, replica, step)` come from a ChaCha8 keystream keyed by
//! `seed`, on stream `replica`, at word offset `step << 16`. Any step of any
//! replica can be regenerated without touching the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Maximum words a single step may consume before colliding with the next.
const STEP_WORDS_LOG2: u32 = 16;

#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
}

impl StreamKey {
    pub fn new(seed: u64, replica: u64) -> Self {
        Self { seed, replica }
    }

    /// Generator positioned at the start of `step`.
    pub fn at_step(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.replica);
        rng.set_word_pos((step as u128) << STEP_WORDS_LOG2);
        rng
    }

    /// Independent auxiliary generator (initial conditions, subsampling).
    pub fn aux(&self, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tag + 1));
        rng.set_stream(self.replica);
        rng
    }

    /// `m` independent `N(0, dt)` increments for `step`.
    pub fn increments(&self, step: u64, m: usize, dt: f64) -> Vec<f64> {
        let mut rng = self.at_step(step);
        let s = dt.sqrt();
        (0..m).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
    }
}
