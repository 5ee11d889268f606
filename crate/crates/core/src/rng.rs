//! Seeded, platform-independent random streams.
//!
//! Every random draw in the toolkit goes through [`Rng`], a ChaCha8
//! counter-based generator, so equal seeds give equal tensors everywhere.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Identifier recorded in run manifests.
pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Independent child stream, e.g. one per fixture component.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner: child,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal(mean, std) as f32).collect();
        Tensor::new(shape, data).expect("shape product matches length")
    }

    pub fn uniform_tensor(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi) as f32).collect();
        Tensor::new(shape, data).expect("shape product matches length")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// A random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
