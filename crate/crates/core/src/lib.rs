//! Factorized encoding models for single-neuron visual responses.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. It contains the whole numeric path: a small reverse-mode tape over
//! dense tensors, the convolutional / self-attention building blocks, the
//! model zoo, the staged freeze-and-train engine, evaluation metrics,
//! interpretability analyses and the synthetic ground-truth neuron generator.
//! File formats, parallel job orchestration and the CLI live in the `ctxmod`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod analysis;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod model;
mod ops;
pub mod param;
pub mod scalar;
pub mod spec;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Side length of the square grayscale stimuli every preset consumes.
pub const IMAGE_SIDE: usize = 50;
/// Pixels per stimulus.
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
