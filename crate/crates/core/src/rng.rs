//! Seeded pseudorandomness.
//!
//! All stochastic behaviour (weight init, dropout masks, shuffling,
//! augmentation, synthetic data) draws from PCG32 (XSH-RR, 64-bit state,
//! 32-bit output). A user seed becomes the initial state; the stream
//! selector is fixed for the root generator and derived from an index for
//! per-sample generators, so work split across samples never depends on
//! processing order.

use rand_core::RngCore;
use rand_pcg::Pcg32;

const ROOT_STREAM: u64 = 0x0a02_bdbf_7bb3_c0a7;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Pcg32,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: Pcg32::new(seed, ROOT_STREAM),
        }
    }

    /// Independent generator for item `index` under `seed`.
    pub fn derive(seed: u64, index: u64) -> Self {
        SeededRng {
            inner: Pcg32::new(seed, ROOT_STREAM ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        let hi = (self.next_u32() as u64) << 21;
        let lo = (self.next_u32() >> 11) as u64;
        (hi | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_f32()).collect()
    }

    /// Standard normal via Box-Muller (one draw per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in `[0, bound)`.
    pub fn below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "below(0)");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}
