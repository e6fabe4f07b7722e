//! Seed derivation.
//!
//! Every random draw in a run comes from a ChaCha stream seeded by mixing the
//! run seed with the coordinates of the draw (phase, step, query, rollout).
//! Parallel and serial execution therefore see the same numbers, and a run
//! resumed from a checkpoint continues with the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain labels keep the streams of different phases apart.
pub mod label {
    pub const QUERY: u64 = 0x5155_4552;
    pub const GEN_STEP: u64 = 0x4753_5450;
    pub const GEN_VERIFY: u64 = 0x4756_4552;
    pub const VER_STEP: u64 = 0x5653_5450;
    pub const REDIRECT_VERIFY: u64 = 0x5256_4552;
    pub const REDIRECT: u64 = 0x5244_4952;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const EVAL: u64 = 0x4556_414c;
    pub const INIT: u64 = 0x494e_4954;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive mix of a sequence of words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Stable 64-bit fingerprint of a string (query ids, preset names).
pub fn fingerprint(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
