//! Seeded random streams.
//!
//! Every consumer derives its own generator from `(seed, tag)`, so the values a
//! component draws never depend on how much randomness other components used
//! or on thread scheduling.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

pub type Rng = Xoshiro256PlusPlus;

pub fn stream(seed: u64, tag: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    Rng::from_seed(bytes)
}
