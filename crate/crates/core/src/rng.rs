//! Seed derivation. Every random stream in the toolkit is keyed by
//! `(base seed, purpose, index)` so that runs can be resumed mid-way and
//! individual pieces (masks, shuffles, renders) reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod stream {
    pub const SYNTH_TRAIN: u64 = 1;
    pub const SYNTH_TEST: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const ANCHORS: u64 = 7;
    pub const SINGLE_LABEL: u64 = 8;
    pub const FINETUNE_MASK: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
