//! Seeding discipline.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`),
//! seeded through `SeedableRng::seed_from_u64`. Independent streams derived
//! from one experiment seed use [`split_seed`], a SplitMix64 mix of the parent
//! seed and a stream tag, so the world, the initial weights and the shuffle
//! order can be varied independently while staying reproducible across
//! machines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of an experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    FpvTrain = 2,
    FpvTest = 3,
    TpvTrain = 4,
    TpvTest = 5,
    FpvInit = 6,
    TpvInit = 7,
    Shuffle = 8,
    PretrainShuffle = 9,
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn split_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(seed ^ splitmix64(stream as u64))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
