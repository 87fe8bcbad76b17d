//! Counter-based random streams keyed by `(seed, domain, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes get distinct domains so their streams never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Prototypes = 1,
    Scene = 2,
    ClassBlock = 3,
    ModelInit = 4,
    Shuffle = 5,
    Beta = 6,
    DetectorInit = 7,
    DetectorShuffle = 8,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"avdet-rs");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
