//! 1-bit image demoiréing toolkit.
//!
//! Binary convolutions run as XNOR-popcount over bit-packed ±1 tensors and
//! are gated per input channel by a lightweight frequency-aware predictor;
//! shortcut shape mismatches are bridged by a shuffle-grouped adapter. A
//! small straight-through-estimator training engine, synthetic moiré data,
//! PSNR/SSIM metrics, checkpoint/image I/O, and runtime verification
//! suites round out the crate.
//!
//! Built with the `parallel` feature (default) the hot kernels run on
//! rayon; without it they fall back to sequential loops with bit-identical
//! results.

// index arithmetic over (b, c, i, j) reads better as explicit ranges
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod image;
pub mod mabg;
pub mod metrics;
pub mod net;
pub mod optim;
mod par;
pub mod sgra;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use par::{configure_threads, parallel_enabled};
