use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::loss::{batch_loss, LossWeights, RegWeighting};
use crate::data::{augment, AacLabel, AugmentConfig, Sample};
use crate::error::{bail, Result};
use crate::model::{AacLiteNet, ModelOutput};
use crate::nn::Forward;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    /// `None` trains on the images as given.
    pub augment: Option<AugmentConfig>,
    pub reg_weighting: RegWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            adam: AdamConfig::default(),
            epochs: 50,
            folds: 10,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            reg_weighting: RegWeighting::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.folds < 2 {
            bail!(Config, "need at least 2 folds, got {}", self.folds);
        }
        self.adam.validate()
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Mixes the run seed with fold, epoch and sample index (splitmix64 rounds),
/// so per-sample randomness does not depend on processing order.
pub fn sample_seed(seed: u64, fold: usize, epoch: usize, index: usize) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    [fold as u64, epoch as u64, index as u64]
        .iter()
        .fold(mix(seed), |h, &v| mix(h ^ v))
}

/// Stacks `samples[indices]` into `[N,3,S,S]`, augmenting each image with its
/// own generator when `augment` is set.
pub fn load_batch(
    samples: &[Sample],
    indices: &[usize],
    augment_cfg: Option<&AugmentConfig>,
    seed: u64,
    fold: usize,
    epoch: usize,
) -> Result<(Tensor, Vec<AacLabel>)> {
    let Some(&first) = indices.first() else {
        bail!(Data, "empty batch");
    };
    let shape = samples[first].image.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * samples[first].image.numel());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        if s.image.shape() != shape.as_slice() {
            bail!(
                Shape,
                "sample {} has shape {:?}, batch uses {:?}",
                s.id,
                s.image.shape(),
                shape
            );
        }
        match augment_cfg {
            Some(cfg) => {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, fold, epoch, i));
                data.extend_from_slice(augment(&s.image, cfg, &mut rng).data());
            }
            None => data.extend_from_slice(s.image.data()),
        }
        labels.push(s.label);
    }
    let mut full = alloc::vec![indices.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::from_vec(&full, data)?, labels))
}

/// One Adam update on a batch; returns the batch loss before the update.
pub fn train_step(
    net: &mut AacLiteNet,
    x: &Tensor,
    labels: &[AacLabel],
    lw: &LossWeights,
    adam: &mut Adam,
) -> Result<f64> {
    net.check_input(x)?;
    let (loss, grads, updates) = {
        let mut f = Forward::new(net.store(), true);
        let xv = f.tape.constant(x.clone());
        let vars = net.forward_vars(&mut f, xv)?;
        let loss = batch_loss(&mut f.tape, &vars, labels, lw)?;
        let value = f.tape.value(loss).item()?;
        if !value.is_finite() {
            bail!(Divergence, "non-finite batch loss {}", value);
        }
        let grads = f.gradients(loss)?;
        if !grads.all_finite() {
            bail!(Divergence, "non-finite gradient at batch loss {}", value);
        }
        (value, grads, f.into_updates())
    };
    adam.step(net.store_mut(), &grads)?;
    Forward::commit(updates, net.store_mut())?;
    Ok(loss)
}

/// One pass over `train` in shuffled mini-batches; returns the
/// sample-weighted mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut AacLiteNet,
    samples: &[Sample],
    train: &[usize],
    cfg: &TrainConfig,
    lw: &LossWeights,
    adam: &mut Adam,
    fold: usize,
    epoch: usize,
) -> Result<f64> {
    if train.is_empty() {
        bail!(Data, "empty training set");
    }
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
        cfg.seed,
        fold,
        epoch,
        usize::MAX,
    )));
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = load_batch(samples, chunk, cfg.augment.as_ref(), cfg.seed, fold, epoch)?;
        total += train_step(net, &x, &labels, lw, adam)? * chunk.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// Trains for `cfg.epochs` epochs with a fresh optimizer, calling `on_epoch`
/// after each.
pub fn train_fold(
    net: &mut AacLiteNet,
    samples: &[Sample],
    train: &[usize],
    cfg: &TrainConfig,
    lw: &LossWeights,
    fold: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &AacLiteNet) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    lw.validate()?;
    let mut adam = Adam::new(cfg.adam);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mean_loss = train_epoch(net, samples, train, cfg, lw, &mut adam, fold, epoch)?;
        let rec = EpochRecord {
            fold,
            epoch,
            mean_loss,
        };
        on_epoch(&rec, net)?;
        records.push(rec);
    }
    Ok(records)
}

/// Inference-mode predictions for `samples[indices]`.
pub fn evaluate(
    net: &AacLiteNet,
    samples: &[Sample],
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = load_batch(samples, chunk, None, 0, 0, 0)?;
        out.extend(net.forward_batch(&x, false)?);
    }
    Ok(out)
}
