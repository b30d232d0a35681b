//! Deterministic random streams.
//!
//! Every stochastic choice in the crate draws from an `RngStream`: ChaCha8
//! keyed by a u64 seed plus a stream id. ChaCha is counter-based, so the
//! same (seed, stream, call sequence) yields identical output on every
//! platform and run. Independent consumers fork distinct stream ids instead
//! of sharing a generator, which keeps draws order-independent across
//! subsystems.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            seed,
            stream,
            inner,
        }
    }

    /// Fresh generator on the same seed but an unrelated stream. Position of
    /// `self` is irrelevant: forks are identified by id alone.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Tensor of i.i.d. N(0, std²) entries. Draws happen at f64 and round
    /// once to the element type, so f32 and f64 tensors from the same stream
    /// agree to rounding.
    pub fn normal_tensor<E: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(self.standard_normal() * std))
            .collect();
        Tensor::new(shape, data).expect("shape/len consistent by construction")
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
