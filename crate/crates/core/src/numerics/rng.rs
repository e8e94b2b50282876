use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::hash::fnv1a64;

/// Seeded random source.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit and therefore
/// identical on every platform. [`Rng::split`] derives an independent
/// sub-stream from the root seed and a label path, never from the parent's
/// position, so the order in which components draw randomness does not
/// matter.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    path: String,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, String::new())
    }

    fn with_path(seed: u64, path: String) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        if !path.is_empty() {
            inner.set_stream(fnv1a64(path.as_bytes()));
        }
        Self { seed, path, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `label`, nested under this generator's path.
    pub fn split(&self, label: &str) -> Rng {
        let path = if self.path.is_empty() {
            label.to_owned()
        } else {
            format!("{}/{label}", self.path)
        };
        Self::with_path(self.seed, path)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn poisson(&mut self, mean: f64) -> u64 {
        Poisson::new(mean).expect("positive mean").sample(&mut self.inner) as u64
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
