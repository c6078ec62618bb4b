//! Seed derivation. Every stochastic routine takes an explicit seed and draws
//! from its own ChaCha stream so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags, kept distinct so subsystems never share random draws.
pub mod stream {
    pub const SCENE: u64 = 0x5343_454E;
    pub const RESTORER_MASK: u64 = 0x5245_5354;
    pub const TRAIN_MASK: u64 = 0x4D41_534B;
    pub const IRREGULAR: u64 = 0x4952_5245;
    pub const INIT_GENERATOR: u64 = 0x4745_4E00;
    pub const INIT_DISCRIMINATOR: u64 = 0x4449_5300;
    pub const INIT_FEATURES: u64 = 0x4645_4154;
    pub const INIT_EMBEDDER: u64 = 0x454D_4244;
    pub const BATCHES: u64 = 0x4241_5443;
    pub const UIDS: u64 = 0x5549_4453;
}
