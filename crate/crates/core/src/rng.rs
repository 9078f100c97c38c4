//! Seeded random number generation and seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one Monte Carlo cell: `splitmix64(splitmix64(splitmix64(base) ^ m) ^ trial)`.
///
/// Every (width, trial) cell can be regenerated from these three numbers
/// alone, independently of the order in which cells are run.
pub fn cell_seed(base_seed: u64, m: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ m) ^ trial)
}
