//! Seeded standard-normal generator.
//!
//! The stream is fully specified so other implementations can reproduce it
//! bit for bit:
//!
//! 1. A SplitMix64 generator is seeded with the 64-bit seed and its first two
//!    outputs become the PCG32 (`Lcg64Xsh32`) state and stream selector.
//! 2. Uniforms are `(next_u64 >> 11) * 2^-53`; the first of each pair is
//!    mapped to `1 - u` so it lies in `(0, 1]`.
//! 3. Box–Muller turns each uniform pair into two normals, emitted cosine
//!    branch first.

use rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg32;
use rand_xoshiro::SplitMix64;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct NormalStream {
    pcg: Pcg32,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        let mut mixer = SplitMix64::seed_from_u64(seed);
        let state = mixer.next_u64();
        let stream = mixer.next_u64();
        Self {
            pcg: Pcg32::new(state, stream),
            spare: None,
        }
    }

    fn uniform(&mut self) -> f64 {
        (self.pcg.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next_normal()).collect()
    }
}

/// Derives a child seed (e.g. one per calibration sample) from a parent seed.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut mixer = SplitMix64::seed_from_u64(parent ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    mixer.next_u64()
}
