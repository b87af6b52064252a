//! Deterministic, decorrelated random substreams.
//!
//! Every consumer of randomness derives its own generator from the master
//! seed and an index path, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Restart,
    Simulate,
    Replication,
    PitDraw,
    BootstrapData,
    BootstrapRefit,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Restart => 0x5245_5354,
            Stream::Simulate => 0x5349_4d55,
            Stream::Replication => 0x5245_504c,
            Stream::PitDraw => 0x5049_5444,
            Stream::BootstrapData => 0x4253_4441,
            Stream::BootstrapRefit => 0x4253_5246,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed derived from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Master seed for a consumer that derives further substreams itself.
pub fn stream_seed(master: u64, kind: Stream, path: &[u64]) -> u64 {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(kind.tag());
    full.extend_from_slice(path);
    derive_seed(master, &full)
}

pub fn stream(master: u64, kind: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, &[kind.tag(), index]))
}

pub fn substream(master: u64, kind: Stream, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, kind, path))
}
