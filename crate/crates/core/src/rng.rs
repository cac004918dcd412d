//! Deterministic random streams.
//!
//! A run derives every generator from its seed, a stream tag and an epoch
//! index, so the batches and noise of epoch `e` do not depend on how much
//! randomness earlier phases consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    Batches = 3,
    TrainNoise = 4,
    ScoreNoise = 5,
    MaskRandom = 6,
    Grouping = 7,
}

pub fn stream(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) ^ index);
    rng
}
