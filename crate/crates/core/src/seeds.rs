//! Seed derivation. Every random stream in the crate is a ChaCha8 stream keyed
//! by a master seed and a stream id, so runs are reproducible and independent
//! experiments never share a stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids used for the different consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    PeInput = 1,
    DatasetNoise = 2,
    InitialState = 3,
    PlantNoise = 4,
    Warmup = 5,
    Repetition = 6,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for `(purpose, index)` under `master`.
pub fn derive_seed(master: u64, purpose: Purpose, index: u64) -> u64 {
    let stream = ((purpose as u64) << 48) ^ index;
    stream_rng(master, stream).next_u64()
}
