//! Seeded randomness.
//!
//! Every source of randomness in the crate flows through [`SeedRng`], a thin
//! wrapper over the ChaCha8 stream cipher RNG. ChaCha8 has a fixed,
//! platform-independent output stream for a given seed, which is what makes
//! whole training runs bit-reproducible: same seed, same corpus, same bytes
//! out.
//!
//! Sub-streams are derived with [`SeedRng::derive`] so that independent
//! consumers (weight init, batch shuffling, corpus synthesis) never share a
//! stream position and can be reordered without perturbing each other.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic RNG used for all initialization, shuffling, and synthesis.
pub struct SeedRng {
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent sub-stream from this RNG's seed and a label.
    ///
    /// The label is folded into the seed with FNV-1a so that, e.g., the
    /// "shuffle" stream and the "init" stream of the same run never overlap.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        SeedRng::new(seed ^ h)
    }

    /// Sample from N(0, std^2).
    pub fn normal(&mut self, std: f64) -> f64 {
        // std = 0 is used for deliberately constant init; Normal rejects it.
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std).unwrap().sample(&mut self.inner)
    }

    /// Vector of N(0, std^2) samples.
    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal(std)).collect()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Vector of uniform samples in [lo, hi).
    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher–Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
