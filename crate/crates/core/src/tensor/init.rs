use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};

/// Counter-based random stream keyed by `(seed, stream id)`.
///
/// Stream ids are conventionally `"<parameter>/generation-<g>"`, so drawing one
/// tensor never perturbs another and the order of re-initialization is irrelevant.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: String,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: impl Into<String>) -> Self {
        let stream = stream.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(stream.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            stream,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Uniform sample on `[-bound, bound]`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (self.inner.random::<f64>() * 2.0 - 1.0) * bound
    }

    /// Uniformly shuffled `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
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

/// `sqrt(6 / fan_in)`: the rectifier-gain uniform bound `sqrt(2) * sqrt(3 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn kaiming_uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor<T> {
    assert!(fan_in > 0, "fan-in must be positive");
    uniform_init(shape, kaiming_bound(fan_in), rng)
}

pub fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        // rounding to f32 can nudge a sample past the bound
        let v = T::of(rng.symmetric(bound));
        v.max(T::of(-bound)).min(T::of(bound))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_values() {
        let a: Tensor<f32> = kaiming_uniform_init(&[8, 3, 3, 4], 36, &mut SeededRng::new(7, "conv/generation-1"));
        let b: Tensor<f32> = kaiming_uniform_init(&[8, 3, 3, 4], 36, &mut SeededRng::new(7, "conv/generation-1"));
        assert_eq!(a, b);
        let c: Tensor<f32> = kaiming_uniform_init(&[8, 3, 3, 4], 36, &mut SeededRng::new(7, "conv/generation-2"));
        assert_ne!(a, c);
    }

    #[test]
    fn samples_respect_support_bound() {
        let bound = kaiming_bound(27);
        let t: Tensor<f32> = kaiming_uniform_init(&[10_000], 27, &mut SeededRng::new(1, "x"));
        assert!(t.data().iter().all(|&v| (v as f64).abs() <= bound));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = SeededRng::new(3, "perm").permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
