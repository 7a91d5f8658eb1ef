//! Named random streams derived from one root seed.
//!
//! Each subsystem draws from its own ChaCha stream so that switching a
//! component off (for example augmentation) does not shift the random
//! numbers seen by any other component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Split,
    Init,
    Batch,
    RandMix,
    Replay,
    Labeler,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Split => 2,
            Stream::Init => 3,
            Stream::Batch => 4,
            Stream::RandMix => 5,
            Stream::Replay => 6,
            Stream::Labeler => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// A stream keyed by an arbitrary label, e.g. a domain name.
pub fn keyed(seed: u64, key: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(1 << 32);
    rng
}
