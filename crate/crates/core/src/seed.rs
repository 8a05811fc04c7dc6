//! Seed derivation. Every random stream in the crate is keyed off a single
//! user seed mixed with a purpose string and integer coordinates, so streams are
//! independent of evaluation order and worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for a named purpose (FNV-1a over the name, then mixed with the seed).
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}

/// Combine a seed with a sequence of coordinates (frame, pixel, iteration, ...).
pub fn hash_coords(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(seed), |acc, &c| {
        mix64(acc ^ mix64(c.wrapping_add(0x632b_e59b_d9b4_e019)))
    })
}

pub fn rng_for(seed: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(hash_coords(seed, coords))
}
