//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (topology, workload, overlay, strategy) gets
//! its own stream, so changing how many draws one of them makes never shifts
//! the values another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and compiler versions.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Derives the seed of sub-stream `name` under `seed`.
pub fn derive(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(name_hash(name)))
}

/// Derives a numbered child seed, e.g. one per trace or per repeat.
pub fn derive_indexed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive(seed, name) ^ splitmix64(index.wrapping_add(1)))
}

pub fn substream(seed: u64, name: &str) -> SimRng {
    SimRng::seed_from_u64(derive(seed, name))
}
