//! Named random streams derived from one run seed.
//!
//! Each stream is a ChaCha8 keystream keyed by the run seed with the stream
//! id taken from an FNV-1a hash of its name, so `shuffle`, `init` and
//! friends never share state. The word position is the whole mutable state,
//! which makes streams trivially checkpointable.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub name: String,
    /// ChaCha word position, as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    name: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(name.as_bytes()));
        Self {
            seed,
            name: name.to_string(),
            rng,
        }
    }

    /// Child stream `name/sub`, independent of this one.
    pub fn derive(&self, sub: &str) -> Self {
        RngStream::new(self.seed, &format!("{}/{}", self.name, sub))
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            name: self.name.clone(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &StreamState) -> Option<Self> {
        let mut s = RngStream::new(state.seed, &state.name);
        s.rng.set_word_pos(state.word_pos.parse().ok()?);
        Some(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in [-scale, scale).
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
