//! Datasets, training loops, checkpoints and the `icm` command line for the
//! [`icm_core`] encoder.
//!
//! - [`data`]: CSV ingestion, train/validation/test splits, sliding windows,
//!   channel capping and the lagged-copy synthetic generator.
//! - [`train`]: supervised training with validation-based selection, the
//!   β/head fine-tuning protocol and test metrics.
//! - [`checkpoint`]: the binary checkpoint format.
//! - [`config`]: run configuration as TOML with command-line overrides.
//! - [`commands`]: what each subcommand does.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod train;

pub use error::{Error, Result};
