use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Seeded counter-based generator (ChaCha8). Identical seeds give identical
/// streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn next_f32(&mut self) -> f32 {
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        loop {
            let v = lo + (hi - lo) * self.next_f32();
            // rounding can land on `hi` when the range is tiny
            if v < hi {
                return v;
            }
        }
    }

    /// `rows x cols` matrix with entries uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32, rows: usize, cols: usize) -> Result<Matrix> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Parameter(format!("uniform range requires lo < hi, got [{lo}, {hi})")));
        }
        let data = (0..rows * cols).map(|_| self.range_f32(lo, hi)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Inverted-dropout mask: each entry is `1/keep` with probability `keep`,
    /// else 0.
    pub fn dropout_mask(&mut self, keep: f32, rows: usize, cols: usize) -> Matrix {
        let scale = 1.0 / keep;
        let data = (0..rows * cols)
            .map(|_| if self.next_f32() < keep { scale } else { 0.0 })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("positive mask shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).uniform(-1.0, 1.0, 2, 2).unwrap();
        let b = Rng::new(42).uniform(-1.0, 1.0, 2, 2).unwrap();
        assert_eq!(a, b);
        let c = Rng::new(43).uniform(-1.0, 1.0, 2, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn narrow_range_is_respected() {
        let lo = 1.0f32;
        let hi = lo + 4.0 * f32::EPSILON;
        let m = Rng::new(1).uniform(lo, hi, 50, 50).unwrap();
        assert!(m.data().iter().all(|&x| x >= lo && x < hi));
    }

    #[test]
    fn empty_range_rejected() {
        assert!(matches!(Rng::new(0).uniform(0.5, 0.5, 1, 1), Err(Error::Parameter(_))));
        assert!(Rng::new(0).uniform(1.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn mean_of_many_samples() {
        let m = Rng::new(9).uniform(-0.1, 0.1, 1000, 100).unwrap();
        let mean: f64 = m.data().iter().map(|&x| x as f64).sum::<f64>() / m.len() as f64;
        // std of the mean is 0.1/sqrt(3e5) ≈ 1.8e-4
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn forks_are_distinct_and_reproducible() {
        let base = Rng::new(7);
        let mut a = base.fork(1);
        let mut b = base.fork(2);
        let mut a2 = Rng::new(7).fork(1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), a2.next_u64());
        assert_ne!(x, y);
        assert_eq!(x, z);
    }
}
