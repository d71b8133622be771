//! Core algorithms for diffusion-driven test-time image adaptation.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! the image container and signal-processing kernels, the deterministic
//! corruption generators, the DDPM schedule/process math, the low-pass
//! structure guidance, the hand-backpropagated networks, and the
//! prediction ensembling rules. File formats, dataset trees, and the CLI
//! live in the companion `difta` crate.
//!
//! The crate is `no_std` (with `alloc`); all transcendental math goes
//! through [`libm`] so results are bit-identical across platforms.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod classifier;
pub mod corruption;
pub mod denoiser;
pub mod diffusion;
pub mod ensemble;
mod error;
pub(crate) mod fmath;
pub mod guidance;
pub mod image;
pub mod jpeg;
pub mod nn;
pub mod rng;

pub use error::CoreError;
