//! Named random streams derived from one root seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that,
//! for example, changing the batch order does not perturb weight init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Noise = 2,
    Init = 3,
    Batch = 4,
    Dropout = 5,
    Eval = 6,
}

pub fn stream(root_seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Sub-stream for item `index` of a purpose, e.g. one per evaluation sample.
pub fn substream(root_seed: u64, purpose: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(((index + 1) << 8) | purpose as u64);
    rng
}
