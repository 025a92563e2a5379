//! Core engine for AACLiteNet, a lightweight CNN with global attention that
//! predicts cumulative (AAC-24) and granular abdominal aortic calcification
//! scores from lateral spine scans.
//!
//! The crate is `no_std` + `alloc`. Everything that touches files, clocks or
//! threads lives in the `aaclite` companion crate.
//!
//! Layout:
//!
//! - [`tensor`]: dense f64 tensors, the define-by-run [`Tape`] and gradient checking.
//! - [`nn`]: convolution, depthwise convolution, normalization, activations, pooling.
//! - [`attention`]: the SAM self-attention and gated feed-forward (GFFM) blocks.
//! - [`model`]: configuration, parameter store, DWBConv encoder and the 33-output head.
//! - [`train`]: losses, class weighting, Adam, stratified folds and the fold loop.
//! - [`data`]: Kauppila labels, preprocessing, augmentation and the synthetic scan renderer.
//! - [`analysis`]: FLOPs/parameter profiler and the clinical metric suite.
//! - [`checks`]: the gradient-check suite shared by the CLI and the tests.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod attention;
pub mod checks;
pub mod data;
mod error;
pub mod math;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
