//! Deterministic random number generation.
//!
//! The generator is a ChaCha8 stream cipher keyed by a 64-bit seed, with a
//! 64-bit stream id so independent substreams can be derived from one seed.
//! All derived values use fixed integer-only mappings, so a given seed yields
//! the same sequence on every platform:
//!
//! * `uniform`: top 53 bits of the next word, scaled to [0, 1)
//! * `normal`: sum of 12 uniforms minus 6 (mean 0, variance 1, bounded tails)
//! * `index`: widening-multiply range reduction of the next word

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Tensor;

/// Seeded deterministic generator. Cloning captures the exact stream position.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    core: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng::with_stream(seed, 0)
    }

    /// Generator for substream `stream` of the given seed. Distinct stream
    /// ids give statistically independent sequences.
    pub fn with_stream(seed: u64, stream: u64) -> Rng {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        Rng { seed, stream, core }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Absolute position in the word stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.core.get_word_pos()
    }

    /// Restores a generator to a previously observed position.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Rng {
        let mut rng = Rng::with_stream(seed, stream);
        rng.core.set_word_pos(word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform draw from [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Approximately standard normal draw: sum of 12 uniforms minus 6.
    /// Exactly reproducible everywhere since it uses only additions.
    pub fn normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// Uniform index in [0, n). Uses one word per draw; the modulo bias of the
    /// widening multiply is below 2^-64 per bucket for any practical `n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let x = self.next_u64();
        ((x as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Tensor with elements drawn from `mean + std * normal()`.
    pub fn normal_tensor(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = mean + std * self.normal();
        }
        t
    }
}
