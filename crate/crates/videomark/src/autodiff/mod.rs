//! Minimal reverse-mode autodiff engine used by the watermarking networks.

pub mod check;
pub mod kernels;
pub mod kernels_fft;
mod scalar;
mod tape;

#[cfg(test)]
mod tests;

pub use scalar::Scalar;
pub use tape::{dct3_apply, Grads, Tape, Var};
