//! Scalar abstraction over the two supported precisions.
//!
//! Gradient checks run in f64; training runs in f32 for throughput. Random
//! draws are always made in f64 and then narrowed, so a given seed produces
//! the same underlying stream in both precisions.

use std::fmt;

/// Element type of [`crate::tensor::Matrix`]: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Copy
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Precision tag stored in checkpoints: bit width of the element.
    const PRECISION_BITS: u8;

    fn from_f64(x: f64) -> Self;
    /// Named to avoid colliding with `num_traits::ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the front of `bytes` (must hold `PRECISION_BITS / 8` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION_BITS: u8 = 32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION_BITS: u8 = 64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
