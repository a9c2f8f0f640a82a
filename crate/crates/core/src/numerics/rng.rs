use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Deterministic counter-based generator.
///
/// Backed by ChaCha20, whose 64-bit stream id gives every `(seed, stream)`
/// pair an independent keystream. Parallel jobs derive their own generator
/// with [`Rng::stream`] instead of sharing one.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha20Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner, seed }
    }

    /// A generator on a stream derived from this generator's seed and a
    /// caller-chosen label. Does not advance `self`.
    pub fn derive(&self, label: u64) -> Rng {
        Self::stream(self.seed, splitmix(label ^ 0x5DEE_CE66_D1CE_4E5B))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// I.i.d. `N(0, std²)` samples of the given shape.
pub fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::param(format!(
            "standard deviation must be finite and >= 0, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| std * rng.normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}
