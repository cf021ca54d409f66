//! Reproducible, splittable random streams.
//!
//! Backed by ChaCha8, a counter-based generator whose output depends only on
//! the seed and the position in the stream, so results are identical across
//! platforms. Child streams are keyed from the parent so that parallel work
//! can be seeded without depending on scheduling.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    splits: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            splits: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n)
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Derives an independent child stream. The parent advances its split
    /// counter but its own output sequence is left untouched.
    pub fn split(&mut self) -> Rng {
        self.splits += 1;
        let child_seed = mix(self.seed ^ mix(self.splits.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut inner = ChaCha8Rng::seed_from_u64(child_seed);
        // distinct stream id keeps children apart even on seed collisions
        inner.set_stream(self.splits);
        Rng {
            seed: child_seed,
            splits: 0,
            inner,
        }
    }

    /// `n` child streams in a fixed order.
    pub fn split_n(&mut self, n: usize) -> Vec<Rng> {
        (0..n).map(|_| self.split()).collect()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
