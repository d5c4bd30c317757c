//! Seed derivation. Every random stream in a run is derived from one 64-bit
//! master seed and a purpose tag, so a single knob reproduces the whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    BatchOrder,
    Augment,
    StatsBatch,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x696e_6974,
            Purpose::BatchOrder => 0x6261_7463,
            Purpose::Augment => 0x6175_676d,
            Purpose::StatsBatch => 0x7374_6174,
        }
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `derive_seed(master, purpose) = mix64(master ^ mix64(tag))`.
pub fn derive_seed(master: u64, purpose: Purpose) -> u64 {
    mix64(master ^ mix64(purpose.tag()))
}

pub fn stream(master: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose))
}
