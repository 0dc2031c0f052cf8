//! Seeded random streams.
//!
//! Every random decision in a run draws from a ChaCha8 stream derived from
//! `(seed, purpose, index)`, so independent consumers (epoch shuffles, pair
//! draws, reference picks) never perturb each other and a run can be resumed
//! at any epoch boundary without saving generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purposes of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Pairs = 3,
    References = 4,
    Split = 5,
    Synthetic = 6,
    Budget = 7,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `purpose` at position `index` (e.g. the epoch number).
pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = mix64((purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix64(index));
    rng.set_stream(id);
    rng
}
