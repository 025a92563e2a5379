//! File formats, dataset IO, k-fold orchestration and the command line for
//! AACLiteNet. The numerics live in [`aaclite_core`].
//!
//! - [`formats`]: the `AACI` image container and checkpoint files.
//! - [`dataset`]: manifests, `load_dataset` and synthetic dataset writing.
//! - [`run`]: stratified k-fold training with reports and checkpoints.
//! - [`report`]: metric and profile tables.
//! - [`cli`]: the `aaclite` binary's commands and exit codes.

pub mod cli;
pub mod dataset;
mod error;
pub mod formats;
pub mod par;
pub mod report;
pub mod run;

pub use aaclite_core as core;
pub use error::{exit, Error, Result};
