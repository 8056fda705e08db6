//! Seeded randomness.
//!
//! Every random stream in a run is derived from the single run seed and a
//! label naming its consumer, so adding a consumer never perturbs the others.

use rand::SeedableRng;

/// Generator used for every random stream: initialization, dropout masks,
/// shuffling, fold planning and synthetic data.
pub type Rng = rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash of a label.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream named `label` under run seed `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ label_hash(label))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}
