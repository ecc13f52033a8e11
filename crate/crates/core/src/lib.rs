//! Detection of adversarial examples (AEs) and backdoor examples (BEs)
//! against small convolutional classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a minimal CNN engine (forward with activation capture, backprop,
//!   SGD training, Gaussian-fuzzing weight mutation, binary model files).
//! - [`data`]: IDX loading, synthetic blobs, trigger stamping, poisoning and
//!   the dataset archive format.
//! - [`attacks`]: FGSM adversarial examples and trigger-stamped backdoor
//!   examples.
//! - [`detect`]: model mutation + SPRT, activation-space switching
//!   likelihood, kernel density, local intrinsic dimensionality, and the
//!   auxiliary dropout / region / squeezing detectors.
//! - [`eval`]: ROC/AUC, detector timing and report emission.

pub mod attacks;
pub mod binio;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod nn;

pub use error::{Error, Result};

/// Seeded RNG used everywhere a stream must be reproducible.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
