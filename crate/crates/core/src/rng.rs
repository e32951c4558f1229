//! Project-wide random streams.
//!
//! Every stochastic choice (initialization, data order, augmentation, label
//! corruption, subset sampling, probe vectors) draws from a ChaCha8 stream
//! keyed by `(seed, domain)` and positioned by a 64-bit stream index. ChaCha is
//! counter based, so a stream is fully determined by those three numbers on
//! every platform, and independent streams can be split off without
//! coordinating with each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags separating the streams derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Order = 2,
    Augment = 3,
    Corrupt = 4,
    Subset = 5,
    Synthetic = 6,
    Probe = 7,
    Children = 8,
}

/// Returns the stream for `(seed, domain)` at position `index`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"rewind01");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Deterministic seed derivation for child jobs (replicates, ensemble members).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
