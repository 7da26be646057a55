//! Seed fan-out: one master seed, independent named ChaCha streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substreams of the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    /// Network initialization, Q-network first.
    Init = 2,
    TdSampling = 3,
    /// Agent rollouts.
    Trajectory = 4,
    /// Uniform picks from the demonstration set.
    Demo = 5,
    Diagnostics = 6,
    /// Expert dataset generation.
    Dataset = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, stream: Stream) -> Rng {
        let mut rng = Rng::seed_from_u64(self.master);
        rng.set_stream(stream as u64);
        rng
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
