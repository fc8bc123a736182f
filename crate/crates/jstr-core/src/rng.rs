//! Seeded splitmix64 generator.
//!
//! Every random decision in this crate flows through this one generator so
//! that corpora, training runs and reports can be replayed exactly — in any
//! language, from the recipe in the README. The increment and finalizer
//! constants are the standard splitmix64 ones.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer applied to each advanced state word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `n`-th output of a splitmix64 stream seeded with `seed`, computed
/// without stepping through the stream. Used to derive independent
/// per-sample and per-step seeds that do not depend on scheduling.
#[inline]
pub fn derive_seed(seed: u64, n: u64) -> u64 {
    mix64(seed.wrapping_add(GAMMA.wrapping_mul(n.wrapping_add(1))))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [0, n). Uses the unbiased rejection-free multiply-shift
    /// reduction; the tiny modulo bias is irrelevant at our ranges but the
    /// 128-bit product keeps the recipe exact and portable.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws.
    pub fn normal(&mut self) -> f32 {
        let u1 = (1.0 - self.next_f32() as f64).max(f64::MIN_POSITIVE);
        let u2 = self.next_f32() as f64;
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Truncated normal: resample until |z| <= 2, then scale by sigma.
    pub fn truncated_normal(&mut self, sigma: f32) -> f32 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }
}
