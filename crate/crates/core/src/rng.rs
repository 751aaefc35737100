//! Seeded pseudo-random generator used for every sampling decision.
//!
//! The algorithm is pinned: xoshiro256** seeded through SplitMix64
//! (`Xoshiro256StarStar::seed_from_u64`). Floats and bounded integers are
//! derived here rather than through a general-purpose distribution layer so
//! that plans stay byte-identical across crate upgrades and reimplementations.
//!
//! - `next_f64`: top 53 bits of the next output, scaled by 2^-53, in [0, 1).
//! - `below(n)`: Lemire's widening multiply with rejection, unbiased.
//! - `standard_normal`: Box-Muller, cosine branch only.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct PlanRng {
    inner: Xoshiro256StarStar,
}

impl PlanRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
