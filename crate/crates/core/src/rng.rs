//! Portable counter-based random streams.
//!
//! Every stream is ChaCha8 keyed by the 64-bit seed (little-endian, zero padded
//! to 32 bytes) with the stream index as the ChaCha stream id. Identical
//! `(seed, stream)` pairs yield identical draws on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Identifier of the generator algorithm, recorded in manifests.
pub const GENERATOR_ID: &str = "chacha8-le64key-v1";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, bound)` by rejection on 32-bit draws.
    pub fn below(&mut self, bound: u32) -> u32 {
        debug_assert!(bound > 0);
        let zone = ((1u64 << 32) / bound as u64) * bound as u64;
        loop {
            let x = self.next_u32();
            if (x as u64) < zone {
                return x % bound;
            }
        }
    }

    /// Uniform digit in `[0, vocab)`.
    pub fn next_digit(&mut self, vocab: u32) -> Result<u8> {
        if !(2..=256).contains(&vocab) {
            return Err(Error::InvalidVocab(vocab));
        }
        Ok(self.below(vocab) as u8)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds for sub-tasks.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed for a named sub-task from a parent seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}
