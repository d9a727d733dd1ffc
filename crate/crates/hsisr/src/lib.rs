//! Hyperspectral single-image super-resolution.
//!
//! A self-contained engine for training and running a compact
//! spectral–spatial unmixing fusion (SSUF) network on hyperspectral cubes:
//! hand-derived gradients over a fixed graph, an Adam trainer with early
//! stopping, the full LR/HR degradation pipeline, and a five-metric
//! evaluation suite. Gradients are verifiable against central finite
//! differences and every kernel ships with an independent oracle test.
//!
//! Start with the runnable programs in `examples/`; the `hsisr` binary wraps
//! the same library surface as subcommands.

pub mod cli;
pub mod config;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod render;
pub mod resample;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use tensor::{ActivationKind, BatchNormState, ConvKernel, Padding, Scalar, Tensor, TensorError};
