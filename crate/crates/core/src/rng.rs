//! Seeded random streams.
//!
//! Every stream is ChaCha20 (`rand_chacha::ChaCha20Rng`) keyed by
//! `seed_from_u64(seed)` and positioned with `set_stream(id)`. Derived draws
//! are defined here by behavior so the sequences can be reproduced elsewhere:
//!
//! * uniform `[0,1)`: `(next_u64 >> 11) * 2^-53`
//! * normal: Box-Muller on two uniforms `u1 = 1 - uniform`, `u2 = uniform`,
//!   returning `r cos(2 pi u2)` then the cached `r sin(2 pi u2)`
//! * integer below `n`: Lemire's widening multiply with rejection

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream identifiers. Distinct purposes never share a stream.
pub mod streams {
    pub const COHORT_GLOBAL: u64 = 0;
    pub const COHORT_SAMPLE_BASE: u64 = 1 << 20;
    pub const MODEL_INIT: u64 = 1 << 40;
    pub const RNA_STUB: u64 = (1 << 40) + 1;
    pub const FOLDS: u64 = (1 << 40) + 2;
    pub const BATCHES: u64 = (1 << 40) + 3;
}

#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }
}
