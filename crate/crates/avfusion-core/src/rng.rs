//! Deterministic seeded randomness.
//!
//! Every stochastic choice in the pipeline flows through [`DetRng`], a
//! ChaCha8 stream keyed from a `u64` master seed plus stream labels. Sample
//! generation derives one independent stream per (master, index) pair, so
//! samples can be produced in any order or in parallel and still come out
//! bit-identical.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 step, used only to expand seeds into ChaCha keys.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub struct DetRng(ChaCha8Rng);

impl DetRng {
    pub fn new(seed: u64) -> DetRng {
        DetRng::with_streams(seed, &[])
    }

    /// Derive an independent generator for a labeled substream, e.g.
    /// `(master, &[sample_index, channel])`.
    pub fn with_streams(seed: u64, streams: &[u64]) -> DetRng {
        let mut state = seed ^ 0x41565f52_4e475f31; // domain separation constant
        let mut key = [0u8; 32];
        for s in streams {
            state ^= splitmix64(&mut state) ^ s.wrapping_mul(0x9e3779b97f4a7c15);
        }
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        DetRng(ChaCha8Rng::from_seed(key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Uses a widening multiply; the modulo bias
    /// at these sizes is far below anything observable.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Pick an index according to non-negative weights. Returns the last
    /// index with positive weight when rounding pushes past the end.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "weighted() needs positive total weight");
        let mut target = self.uniform() * total;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                if target < w {
                    return i;
                }
                target -= w;
            }
        }
        last_positive
    }
}
