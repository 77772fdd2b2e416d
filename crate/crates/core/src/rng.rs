//! Seed discipline.
//!
//! Every stochastic stage draws from ChaCha8 (a counter-based stream cipher
//! generator) keyed by the 64-bit scenario seed, with the stage selecting an
//! independent 64-bit stream via `set_stream`. Reproducing a stream elsewhere
//! needs only the seed, the stage number below and the ChaCha8 block function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    MealEvents = 1,
    MealSizes = 2,
    MealTiming = 3,
    FisData = 4,
    ClbfInit = 5,
    ClbfSamples = 6,
    ClbfBatches = 7,
    MonteCarlo = 8,
    HumanNoise = 9,
    Patients = 10,
}

/// Generator for `stage` under scenario `seed`; `sub` separates repeated uses
/// (e.g. one stream per simulated day) inside a stage.
pub fn stream(seed: u64, stage: Stage, sub: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 48) ^ sub);
    rng
}
