//! Seed derivation for independent random sub-streams.
//!
//! Every random draw in a run descends from the scenario seed through a named
//! sub-stream, so adding draws to one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generator for the sub-stream called `name`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[name_key(name)]))
}

/// Generator keyed by `name` plus arbitrary integer coordinates.
pub fn keyed(seed: u64, name: &str, parts: &[u64]) -> ChaCha8Rng {
    let base = derive_seed(seed, &[name_key(name)]);
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
