//! Seed derivation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable that overrides the master seed of a CLI run.
pub const SEED_ENV: &str = "NEUROTUNE_SEED";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a master seed and a path of
/// labels, e.g. `derive(master, &["fold", "3"])`.
pub fn derive(master: u64, path: &[&str]) -> u64 {
    let mut h = splitmix64(master);
    for part in path {
        for b in part.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        h = splitmix64(h ^ 0xff);
    }
    h
}

pub fn derive_idx(master: u64, tag: &str, idx: u64) -> u64 {
    splitmix64(derive(master, &[tag]) ^ splitmix64(idx))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
