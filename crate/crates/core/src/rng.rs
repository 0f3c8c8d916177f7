//! Per-trajectory random streams.
//!
//! Every random draw in an ensemble comes from a ChaCha8 stream keyed by the
//! run seed and a purpose tag, with the trajectory index selecting the stream.
//! Output therefore depends only on `(seed, index)`, never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Distinguishes independent uses of the same run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    InnerField = 1,
    EscapeSampler = 2,
    Bootstrap = 3,
    Starts = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose as u64)));
    rng.set_stream(index);
    rng
}
