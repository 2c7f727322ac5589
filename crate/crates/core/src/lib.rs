//! Compressive-memory channel mixing for encoder-only time-series transformers.
//!
//! This crate is `no_std` and only needs `alloc`. It contains everything that is
//! pure computation:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff graph.
//! - [`attention`]: bidirectional multi-head attention and the Infini-Channel
//!   Mixer (ICM), which pools keys and values from every channel into a
//!   per-head compressive memory and blends the retrieved global context with
//!   local dot-product attention through a learned per-head gate.
//! - [`mixer`]: the competing channel-mixing designs (channel independence,
//!   channel concatenation with relative channel biases, static channel
//!   embeddings).
//! - [`encoder`]: the patched encoder backbone and linear forecasting heads.
//! - [`optim`], [`metrics`] and [`gradcheck`]: training building blocks.
//!
//! IO, datasets, checkpoints and the command line live in the `icm` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attention;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mixer;
pub mod nn;
pub mod optim;
mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::{Gradients, Graph, Tensor, Var};
