//! Named, seeded random streams.
//!
//! Every stage of a run (augmentation, head init, shuffling, reservoir
//! sampling, dataset synthesis) draws from its own generator whose seed is
//! derived from a global seed and the stage name, so stages stay
//! reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the stage called `name` under `global`.
pub fn stage_seed(global: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the global seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ splitmix64(h))
}

/// Seed for the `index`-th item of a stream seeded with `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(global: u64, name: &str) -> StageRng {
    rng_from_seed(stage_seed(global, name))
}
