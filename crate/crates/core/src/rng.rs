//! Seeded random streams. Every consumer of randomness draws from its own
//! named stream derived from the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Gumbel,
    Dropout,
    Shuffle,
    Synthetic,
    Evaluation,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Gumbel => 2,
            Stream::Dropout => 3,
            Stream::Shuffle => 4,
            Stream::Synthetic => 5,
            Stream::Evaluation => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
