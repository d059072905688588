//! Seeded, platform-independent random source.
//!
//! Backed by ChaCha8, whose output stream is specified bit-for-bit, so the
//! same seed and call sequence reproduce the same draws everywhere.
//! Independent streams (per request, per worker) are derived with
//! [`Rng::stream`].

use super::Tensor;
use crate::error::{arg_err, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

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

    /// An independent generator for sub-stream `stream` of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(shape, 1) by Marsaglia–Tsang, used for Dirichlet draws.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = self.uniform();
            return self.gamma(shape + 1.0) * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        let draws: Vec<f64> = (0..k).map(|_| self.gamma(alpha).max(1e-300)).collect();
        let total: f64 = draws.iter().sum();
        draws.iter().map(|g| g / total).collect()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. draws from `N(mean, std^2)`.
pub fn normal_sample(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return arg_err(format!(
            "normal_sample needs finite mean and std >= 0, got std={std}"
        ));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Tensor::new(shape.to_vec(), data)
}
