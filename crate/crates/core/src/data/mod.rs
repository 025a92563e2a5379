//! Kauppila AAC-24 labels, scan preprocessing and augmentation, and the
//! synthetic lateral-scan renderer used for desk-scale experiments.

mod augment;
mod labels;
mod preprocess;
mod synthetic;

pub use augment::{augment, AffineParams, AugmentConfig};
pub use labels::{
    granular_to_cumulative, score_to_risk, segment_score_from_extent, AacLabel, Risk,
    MAX_CUMULATIVE,
};
pub use preprocess::{crop_bounds, preprocess, resize_bilinear, RawScan, DEFAULT_INPUT_SIZE};
pub use synthetic::{
    decode_granular, generate_synthetic_dataset, render_scan, split_counts, Layout,
    ScoreDistribution, SyntheticSample, DEFAULT_CATEGORY_COUNTS,
};

use alloc::string::String;

use crate::tensor::Tensor;

/// A preprocessed image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: AacLabel,
    /// `[3, S, S]`
    pub image: Tensor,
}
