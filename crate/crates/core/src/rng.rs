//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by `(seed, stream, index)`.
//! The triple is hashed into a ChaCha8 key, so the draw for sample `i` does
//! not depend on how many other samples were drawn before it or on which
//! thread produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams so unrelated consumers never share keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    NetInit = 1,
    MixtureSample = 2,
    Source = 3,
    CfmBatch = 4,
    Rejection = 5,
    PcGrad = 6,
    Rollout = 7,
    TvrBatch = 8,
    Evaluation = 9,
    Probe = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for one `(stream, index)` cell.
    pub fn at(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(key(self.seed, stream as u64, index))
    }

    /// Generator for a two-level index, e.g. (trajectory, step).
    pub fn at2(&self, stream: Stream, major: u64, minor: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(key(key(self.seed, stream as u64, major), 0x5bd1_e995, minor))
    }

    /// A derived seed, for handing a sub-experiment its own key space.
    pub fn derive(&self, stream: Stream, index: u64) -> u64 {
        key(self.seed, stream as u64, index)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.rotate_left(17)) ^ index)
}
