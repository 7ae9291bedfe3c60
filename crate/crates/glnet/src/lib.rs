//! Files, command-line plumbing and measurement for global-local
//! segmentation networks.
//!
//! The numerical work lives in [`glnet_core`]; this crate adds the dataset
//! layout on disk, PNG and checkpoint formats, training configuration files,
//! directory-level inference, a counting allocator for peak-memory probes and
//! the accuracy-versus-memory sweep.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod infer;
pub mod memory;
pub mod sweep;

pub use error::{Error, Result};
pub use glnet_core as core;
