pub mod cli;
pub mod config;
pub mod delay;
pub mod error;
pub mod heat;
pub mod harness;
pub mod hjb;
pub mod ou;
pub mod smoothing;
pub mod spectral;

pub use error::{Error, Result};

/// Seed for sub-stream `index` of a run seeded with `seed` (SplitMix64 mix).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
