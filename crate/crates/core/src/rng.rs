//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit seed. Child streams
//! are keyed by mixing the parent's *seed* with a label, never its state, so
//! a child is unaffected by how many values the parent has produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream named by `label`.
    pub fn derive(&self, label: &str) -> SeededRng {
        SeededRng::new(splitmix64(splitmix64(self.seed) ^ fnv1a(label.as_bytes())))
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform<T: Scalar>(&mut self, lo: T, hi: T) -> T {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * T::from_f64_lossy(u)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `n` i.i.d. draws from `N(0, sigma^2)`.
    pub fn gaussian<T: Scalar>(&mut self, n: usize, sigma: T) -> Result<Vec<T>> {
        if sigma < T::zero() || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("gaussian std-dev must be finite and >= 0, got {sigma}")));
        }
        if sigma == T::zero() {
            return Ok(vec![T::zero(); n]);
        }
        Ok((0..n).map(|_| sigma * T::from_f64_lossy(self.standard_normal())).collect())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `amount` distinct values from `0..n`, in sampling order.
    pub fn sample_distinct(&mut self, n: usize, amount: usize) -> Vec<usize> {
        assert!(amount <= n, "cannot draw {amount} distinct values from {n}");
        // Partial Fisher-Yates.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..amount {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(amount);
        pool
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
