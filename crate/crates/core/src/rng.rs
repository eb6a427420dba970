//! Counter-based random streams.
//!
//! One master seed; each consumer (event id, trajectory id, ...) gets its
//! own ChaCha stream selected by `set_stream`, so results do not depend on
//! the order in which work items are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-domain tags so simulation and reconstruction never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Simulation = 1,
    Reconstruction = 2,
    Ensemble = 3,
    Validation = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    pub master_seed: u64,
}

impl StreamFactory {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent stream for work item `index` within `domain`.
    pub fn stream(&self, domain: Domain, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed ^ (domain as u64).rotate_left(56));
        rng.set_stream(index);
        rng
    }
}
