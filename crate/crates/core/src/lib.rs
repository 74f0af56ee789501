//! Numerical core of the PainAttnNet pain-intensity classifier.
//!
//! Everything in this crate is pure computation over owned buffers: dense
//! tensors, layers with hand-written backward passes, the network itself,
//! the training loop with leave-one-subject-out evaluation, classification
//! metrics and a synthetic electrodermal-activity generator. It builds
//! without `std` (only `alloc` is required); file formats, threading and the
//! command-line front end live in the companion `painattn` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Random generator used for every stochastic step (init, dropout, shuffling, synthesis).
pub type Rng = rand_chacha::ChaCha8Rng;

/// Deterministically derive a child seed from a parent seed and a key.
///
/// SplitMix64 finalizer over the pair; used to hand independent streams to
/// folds, subjects and layers without depending on iteration order.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
