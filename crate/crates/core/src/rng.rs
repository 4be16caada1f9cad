//! The simulator's random source.
//!
//! Streams are xoshiro256** seeded through SplitMix64 (`seed_from_u64`).
//! Every draw below is defined in terms of `next_u64` so traces are
//! reproducible across platforms:
//!
//! - `unit()`: `(next_u64 >> 11) * 2^-53`, uniform in `[0, 1)`.
//! - `uniform_inclusive(lo, hi)`: `lo + next_u64 % (hi - lo + 1)`.
//! - `bernoulli(p)`: `unit() < p`.
//! - `exponential_ms(rate_per_hour)`: `-ln(1 - unit()) / rate` hours, in ms,
//!   rounded down.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const MS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Clone, Debug)]
pub struct SimRng(Xoshiro256StarStar);

impl SimRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        SimRng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Independent stream for a numbered component (a site, the portal).
    pub fn stream(seed: u64, index: u64) -> Self {
        let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::seed_from_u64(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            return lo;
        }
        let span = hi - lo;
        match span.checked_add(1) {
            Some(n) => lo + self.next_u64() % n,
            None => self.next_u64(),
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.unit() < p
    }

    /// Waiting time until the next arrival of a Poisson process. `None` when
    /// the rate is zero (never); zero when the rate is infinite.
    pub fn exponential_ms(&mut self, rate_per_hour: f64) -> Option<u64> {
        if rate_per_hour <= 0.0 || rate_per_hour.is_nan() {
            return None;
        }
        if rate_per_hour.is_infinite() {
            return Some(0);
        }
        let u = self.unit();
        let hours = -libm::log(1.0 - u) / rate_per_hour;
        Some((hours * MS_PER_HOUR) as u64)
    }
}
