//! Seed derivation for independent pseudorandom streams.
//!
//! Every consumer of randomness derives its own stream from the global seed
//! plus a purpose tag and indices, so the order in which streams are used
//! (or whether some are used at all) never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags; each keeps its streams disjoint from the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Anchors = 1,
    Zoo = 2,
    Dataset = 3,
    Partition = 4,
    Split = 5,
    ModelInit = 6,
    Sampling = 7,
    LocalTraining = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed`, a stream tag and two indices into one 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn stream(seed: u64, stream: Stream, a: u64, b: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, a, b))
}
