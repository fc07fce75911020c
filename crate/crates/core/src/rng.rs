//! Seed hierarchy: one master seed fans out into named, independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named substreams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Graph,
    Partition,
    Split,
    Bandwidth,
    ModelInit,
    Training,
    Policy,
    AgentInit,
    AgentNoise,
    AgentReplay,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Graph => 0x01,
            Stream::Partition => 0x02,
            Stream::Split => 0x03,
            Stream::Bandwidth => 0x04,
            Stream::ModelInit => 0x05,
            Stream::Training => 0x06,
            Stream::Policy => 0x07,
            Stream::AgentInit => 0x08,
            Stream::AgentNoise => 0x09,
            Stream::AgentReplay => 0x0a,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.tag()) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, stream, index))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
