//! Seeded random streams.
//!
//! All sampling goes through [`Stream`], a ChaCha8 generator (`rand_chacha`)
//! seeded from a `u64` with the `rand_core` PCG32 seed expansion. Both
//! algorithms are fixed, so streams are reproducible across platforms.
//! Uniform doubles take the top 53 bits of a `u64`; normal variates use the
//! Box-Muller transform and hand out the two values of each pair in order.

use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream derived from `seed` and a list of indices.
    pub fn derived(seed: u64, indices: &[u64]) -> Self {
        Self::new(mix_seed(seed, indices))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on (0, 1].
    fn uniform_open_low(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with indices into a new seed (SplitMix64 chain).
pub fn mix_seed(seed: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}
