//! IO, file formats, benchmark harness, and CLI for the
//! diffusion-driven test-time adaptation toolkit.
//!
//! The algorithms live in `difta-core`; this crate adds everything that
//! touches the filesystem: PNG images, dataset trees and manifests,
//! checkpoints, the synthetic source domain, the corruption runner, the
//! evaluation/ablation harness with its reports, configuration, and the
//! `difta` binary.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corrupt;
pub mod dataset;
mod error;
pub mod exec;
pub mod pngio;
pub mod synth;

pub use error::{CliError, ErrorCategory};

/// Version tag written into run records and checkpoints.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
