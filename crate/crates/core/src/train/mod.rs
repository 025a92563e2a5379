//! The combined loss, class weighting, Adam, stratified folds and the
//! mini-batch fold loop.

mod adam;
mod fit;
mod kfold;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use fit::{
    evaluate, load_batch, sample_seed, train_epoch, train_fold, train_step, EpochRecord,
    TrainConfig,
};
pub use kfold::{stratified_kfold, Fold};
pub use loss::{
    batch_loss, compute_class_weights, total_loss, weighted_cce, weighted_mse, LossWeights,
    RegWeighting, CCE_FLOOR, CLASS_WEIGHT_CAP,
};
