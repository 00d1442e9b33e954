//! Multi-scale residual graph convolution networks for human motion
//! prediction, implemented from scratch: dense numeric core with manual
//! backpropagation, the four-scale encoder/decoder, pose abstraction,
//! training with per-scale supervision, and MPJPE evaluation.

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod multiscale;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar};

/// Derives a purpose-specific seed from the run seed so the independent
/// random streams (init, shuffling, dropout) never alias.
pub fn seed_for(seed: u64, purpose: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.rotate_left(17)
}
