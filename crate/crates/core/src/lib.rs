//! Cyclic video object segmentation at desk scale.
//!
//! The crate implements a small memory-matching segmentation network that is
//! differentiable with respect to its reference masks, a cycle-consistency
//! training loop, gradient-corrected online inference, receptive-field and
//! frequency-response analysis tools, and a reference-noise robustness
//! harness. Everything runs on CPU; the hot kernels are data-parallel via
//! rayon (disable the `parallel` feature for a sequential build).

pub mod analysis;
pub mod config;
pub mod correct;
pub mod dataio;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod mask;
pub mod net;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
