//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`Streams`] family: a 64-bit
//! seed plus a purpose tag selects a ChaCha8 key, and an index (usually a
//! subject or chain number) selects the stream within that key. Streams are
//! counter based, so the values drawn for subject 17 do not depend on
//! whether subject 16 was generated first, or at all.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags. Distinct tags give statistically independent streams.
pub mod purpose {
    pub const COVARIATES: u64 = 1;
    pub const ENCOUNTERS: u64 = 2;
    pub const RANDOM_EFFECTS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const CHAIN: u64 = 5;
    pub const INFLATION: u64 = 6;
    pub const JITTER: u64 = 7;
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a seed with further labels into a child seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l.wrapping_add(0x632B_E59B_D9B4_E019))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The generator for `(purpose, index)`.
    pub fn stream(&self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = derive_seed(self.seed, &[purpose]);
        for chunk in key.chunks_mut(8) {
            state = mix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}
