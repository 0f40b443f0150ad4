//! Reference implementation of fully-quantized MXFP4 training.
//!
//! The crate is `no_std` (it needs `alloc`) and purely computational:
//!
//! - [`mxfp4`]: bit-exact E2M1/E8M0 codec and the packed `MXF4` container
//! - [`hadamard`]: blockwise and randomized fast Walsh-Hadamard transforms
//! - [`quantizers`]: RTN-AbsMax, SR-AbsMax and QuEST group quantizers
//! - [`qlinear`]: the quantized linear layer forward/backward pass
//! - [`diagnostics`]: MSE, projection magnitude misalignment and gradient profiles
//! - [`scaling`]: precision-aware scaling law evaluation, fitting and optimality regions
//! - [`trainkit`]: a small AdamW training harness built from quantized layers
//!
//! All randomness comes from the counter-based generator in [`rng`], so every
//! result is a pure function of its inputs and seeds.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diagnostics;
mod error;
pub mod hadamard;
mod matrix;
pub mod mxfp4;
pub mod qlinear;
pub mod quantizers;
pub mod rng;
pub mod scaling;
pub mod trainkit;

pub use error::{Error, Result};
pub use matrix::Matrix;
