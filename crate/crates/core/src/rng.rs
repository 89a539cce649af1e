//! Portable seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], whose streams are
//! fully specified here:
//!
//! - Generator: xoshiro256++ whose 256-bit state is filled from the `u64` seed
//!   by four successive SplitMix64 outputs.
//! - Uniform `[0, 1)`: the top 53 bits of the next output times `2^-53`.
//! - Standard normal: Box–Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`;
//!   one normal per two uniforms, the sine branch is discarded.
//! - Bounded integer `[0, n)`: high 64 bits of the 128-bit product `next_u64 * n`.
//! - Substreams: seed `splitmix64(seed ^ splitmix64(stream))`.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// One step of SplitMix64 applied to `x` as a pure mixing function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent substream of `seed`.
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn substream(seed: u64, stream: u64) -> Self {
        Self::new(substream_seed(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates, drawing `below(i + 1)` for `i` from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
