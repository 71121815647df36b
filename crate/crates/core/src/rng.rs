//! Counter-based random streams.
//!
//! A stream is identified by `(seed, label)`; its position is a counter of
//! 64-bit words consumed. The keystream is ChaCha8 keyed by
//! `SHA-256(seed_le || label)`, so draws depend only on those three values
//! and are identical on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
    core: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self::at(seed, label, 0)
    }

    /// Stream positioned after `counter` words have been drawn.
    pub fn at(seed: u64, label: &str, counter: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut core = ChaCha8Rng::from_seed(key);
        // word_pos counts 32-bit words
        core.set_word_pos(u128::from(counter) * 2);
        Self { seed, label: label.to_owned(), counter, core }
    }

    /// Independent child stream; the label path is `parent/name`.
    pub fn substream(&self, name: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, name))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is < 2^-64 * n, irrelevant here
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch, two words per draw).
    pub fn normal(&mut self) -> f64 {
        let (z0, _) = self.box_muller();
        z0
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fill with i.i.d. N(mean, std^2) draws, using both Box-Muller branches.
    pub fn fill_normal(&mut self, out: &mut [f32], mean: f32, std: f32) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.box_muller();
            pair[0] = mean + std * a as f32;
            pair[1] = mean + std * b as f32;
        }
        if let [last] = chunks.into_remainder() {
            *last = mean + std * self.normal() as f32;
        }
    }

    pub fn normal_vec(&mut self, n: usize, mean: f32, std: f32) -> Vec<f32> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v, mean, std);
        v
    }

    /// Fisher-Yates shuffle.
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
    fn same_coordinates_same_draws() {
        let mut a = RngStream::new(7, "x");
        let mut b = RngStream::new(7, "x");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(7, "y");
        assert_ne!(RngStream::new(7, "x").next_u64(), c.next_u64());
    }

    #[test]
    fn counter_resumes_stream() {
        let mut a = RngStream::new(3, "lbl");
        for _ in 0..37 {
            a.next_u64();
        }
        let mut b = RngStream::at(3, "lbl", a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(11, "moments");
        let v = r.normal_vec(200_000, 0.0, 1.0);
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn below_in_range() {
        let mut r = RngStream::new(1, "b");
        for n in 1..50 {
            assert!(r.below(n) < n);
        }
    }
}
