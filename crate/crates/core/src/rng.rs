//! Seedable random number generation.
//!
//! Every stochastic step in this crate (parameter init, corpus generation,
//! batch shuffling) draws from [`Rng`], so a run is fully determined by its
//! seeds. The generator is pinned precisely enough to reproduce runs from
//! an independent implementation:
//!
//! - Core generator: **xoshiro256\*\*** (Blackman & Vigna), 256-bit state,
//!   64-bit output.
//! - Seeding: the four state words are the first four outputs of
//!   **SplitMix64** applied to the `u64` seed.
//! - `uniform`: the top 53 bits of `next_u64`, scaled by 2^-53, giving a
//!   double in `[0, 1)`.
//! - `normal`: Box–Muller on two fresh uniforms per call (no caching of
//!   the second deviate); the first uniform is shifted into `(0, 1]` so
//!   the logarithm is finite.
//! - `below(n)`: bitmask rejection sampling, exactly uniform over `0..n`.

use alloc::vec::Vec;

/// xoshiro256** generator with SplitMix64 seeding.
#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = splitmix64(&mut sm);
        }
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate via Box–Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let mask = n.next_power_of_two().wrapping_sub(1);
        loop {
            let candidate = self.next_u64() & mask;
            if candidate < n {
                return candidate as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derives an independent child generator; used to give each corpus
    /// sentence its own stream.
    pub fn derive(&mut self) -> Rng {
        Rng::seed_from_u64(self.next_u64())
    }

    pub fn normals(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.normal()).collect()
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
