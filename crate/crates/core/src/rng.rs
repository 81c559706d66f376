//! Seeded random streams.
//!
//! `Rng` wraps xoshiro256++, whose `seed_from_u64` expands the seed with
//! SplitMix64; the same seed always yields the same stream.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label,
    /// so adding consumers of one stream never perturbs another.
    pub fn fork(&self, label: &str) -> Rng {
        // FNV-1a over the label, mixed with the parent seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Rng::new(self.seed ^ h.rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<S> {
        let data = (0..shape.numel()).map(|_| S::from_f64(self.uniform_range(lo, hi))).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: Shape, std: f64) -> Tensor<S> {
        let data = (0..shape.numel()).map(|_| S::from_f64(std * self.normal())).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let a = Rng::new(9);
        let mut b = Rng::new(9);
        b.next_u64();
        assert_eq!(a.fork("x").next_u64(), b.fork("x").next_u64());
        assert_ne!(a.fork("x").next_u64(), a.fork("y").next_u64());
    }
}
