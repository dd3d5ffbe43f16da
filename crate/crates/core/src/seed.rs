//! Seed derivation. Every random stream is a ChaCha8 generator seeded with
//! `splitmix64(master ^ fnv1a64(purpose))`, so a single master seed replays a
//! whole run and streams for different purposes never coincide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const PAIRS: &str = "pairs";
pub const NOISE: &str = "noise";
pub const SIM: &str = "sim";
pub const FORECAST: &str = "forecast";

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    splitmix64(master ^ fnv1a64(purpose))
}

pub fn stream(master: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose))
}

/// Stream for an indexed sub-task, e.g. one forecast target.
pub fn substream(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(derive_seed(master, purpose) ^ splitmix64(index)))
}
