//! Seeded random streams.
//!
//! Every source of randomness is a ChaCha8 stream keyed by
//! `(run seed, domain, index)`. Streams never alias, so data draws,
//! perturbation draws and initialisation can be replayed independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Stream domains. The numeric values are part of the replay contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Data = 1,
    Eval = 2,
    Init = 3,
    Perturb = 4,
    Monitor = 5,
    LayerReset = 6,
}

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, domain as u64, index]))
}

/// Exact position of a ChaCha stream, enough to resume it bit-for-bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngCursor {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
