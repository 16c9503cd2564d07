//! Reproducible random streams.
//!
//! Every source of randomness in the crate is a named stream keyed by
//! `(global seed, stream name)`. Streams are backed by ChaCha8, a
//! counter-based generator, so the values drawn from one stream are
//! independent of how many draws other streams have made. Same key, same
//! sequence — on any platform, any thread count.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Root of all randomness for one run.
#[derive(Debug, Clone, Copy)]
pub struct RngPool {
    seed: u64,
}

impl RngPool {
    pub fn new(seed: u64) -> RngPool {
        RngPool { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Open the named stream. Reopening yields the same sequence from the start.
    pub fn stream(&self, name: &str) -> RngStream {
        RngStream::new(self.seed, name)
    }
}

/// One independent, reproducible random sequence.
pub struct RngStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> RngStream {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed ^ fnv1a64(name.as_bytes()));
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        RngStream { rng: ChaCha8Rng::from_seed(key), spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo bias is irrelevant at 64 bits for desk-scale n.
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller; pairs are cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_independent() {
        let pool = RngPool::new(7);
        let a: Vec<u64> = {
            let mut s = pool.stream("noise");
            (0..8).map(|_| s.next_u64()).collect()
        };
        let a2: Vec<u64> = {
            let mut s = pool.stream("noise");
            (0..8).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = pool.stream("time");
            (0..8).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments() {
        let mut s = RngPool::new(123).stream("mc");
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = s.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_strictly_inside_unit_interval() {
        let mut s = RngPool::new(1).stream("u");
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
