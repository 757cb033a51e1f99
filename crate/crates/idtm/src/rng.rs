//! Deterministic RNG substreams.
//!
//! All randomness in a run flows from a single `u64` seed. Each component
//! draws from its own ChaCha stream so that components can be exercised in
//! isolation without perturbing each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Generator,
    Seating,
    Chains,
    Concentrations,
    Heldout,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Generator => 1,
            Stream::Seating => 2,
            Stream::Chains => 3,
            Stream::Concentrations => 4,
            Stream::Heldout => 5,
        }
    }
}

/// RNG for a named component substream.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Per-topic RNG for chain updates: independent of execution order, so chain
/// updates for distinct topics may run on any number of workers.
pub fn chain_stream(seed: u64, sweep: u64, topic: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sweep.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(0x1000_0000 + topic as u64);
    rng
}
