//! Seeded random streams.
//!
//! Every stochastic step draws from a `Xoshiro256PlusPlus` generator whose
//! state is expanded from a 64-bit seed with SplitMix64. Independent streams
//! (initialization, minority choice, sampling, shuffling) are derived from one
//! base seed by mixing in a stream tag, so adding draws to one stream never
//! shifts another.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Minority = 2,
    Sampling = 3,
    Shuffle = 4,
    Subspace = 5,
    Fixture = 6,
}

/// One step of SplitMix64.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(seed ^ splitmix64(stream as u64))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    rng_from_seed(derive_seed(seed, stream))
}
