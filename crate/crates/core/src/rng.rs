//! Seeded random sources.
//!
//! Everything stochastic in the crate (initialization, routing noise, dropout,
//! batch shuffling) draws from a ChaCha8 stream so that runs are reproducible
//! from a single integer seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use rand::Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a given (seed, stream) pair, e.g. one per training step.
///
/// Resuming at step `s` only needs `s`, not the state of any earlier stream.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
