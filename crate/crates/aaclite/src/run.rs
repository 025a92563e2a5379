//! Stratified k-fold training runs: per-fold models, reports, checkpoints
//! and pooled out-of-fold metrics.
//!
//! Files written to the output directory:
//!
//! - `reports.jsonl`: `{fold, epoch, mean_loss, wall_ms}` per fold and epoch.
//! - `predictions.jsonl`: one out-of-fold prediction per sample.
//! - `metrics.json`: per-fold and pooled metrics.
//! - `fold{k}.aacl`: the model trained on fold `k`'s training split.
//! - `final.aacl`: with `final_fit`, a model trained on every sample.

use std::fs;
use std::path::Path;
use std::time::Instant;

use aaclite_core::analysis::{predicted_risk, MetricsReport};
use aaclite_core::data::{AacLabel, Sample};
use aaclite_core::model::{AacLiteNet, ModelConfig, ModelOutput};
use aaclite_core::train::{
    compute_class_weights, evaluate, stratified_kfold, train_fold, LossWeights, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::error::{IoContext, Result};
use crate::formats::save_checkpoint;
use crate::par::par_map;
use crate::report::metrics_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    /// Inverse-frequency weights from the training split.
    #[default]
    Inverse,
    Uniform,
}

impl ClassWeighting {
    pub fn name(self) -> &'static str {
        match self {
            Self::Inverse => "inverse",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inverse" => Some(Self::Inverse),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }

    pub fn weights(self, labels: &[AacLabel], cfg: &TrainConfig) -> Result<LossWeights> {
        Ok(match self {
            Self::Inverse => compute_class_weights(labels, cfg.reg_weighting)?,
            Self::Uniform => LossWeights::uniform(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub class_weighting: ClassWeighting,
    /// Folds trained concurrently; results do not depend on it.
    pub threads: usize,
    pub final_fit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochReport {
    pub fold: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub fold: usize,
    pub id: String,
    pub aac24_score: f64,
    pub cumulative: u8,
    pub predicted_risk: String,
    pub risk: String,
    pub granular: [u8; 8],
    pub predicted_granular: [u8; 8],
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_size: usize,
    pub epochs: Vec<EpochReport>,
    pub predictions: Vec<Prediction>,
    pub outputs: Vec<ModelOutput>,
    pub labels: Vec<AacLabel>,
    pub metrics: MetricsReport,
    pub model: AacLiteNet,
}

impl FoldOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Over all out-of-fold predictions.
    pub pooled: MetricsReport,
    pub final_model: Option<(AacLiteNet, Vec<EpochReport>)>,
}

fn fit(
    samples: &[Sample],
    train: &[usize],
    cfg: &RunConfig,
    fold: usize,
    progress: &(dyn Fn(&EpochReport) + Sync),
) -> Result<(AacLiteNet, Vec<EpochReport>)> {
    let mut net = AacLiteNet::build(&cfg.model)?;
    let labels: Vec<AacLabel> = train.iter().map(|&i| samples[i].label).collect();
    let lw = cfg.class_weighting.weights(&labels, &cfg.train)?;
    let mut reports = Vec::with_capacity(cfg.train.epochs);
    let mut clock = Instant::now();
    train_fold(&mut net, samples, train, &cfg.train, &lw, fold, |rec, _| {
        let r = EpochReport {
            fold: rec.fold,
            epoch: rec.epoch,
            mean_loss: rec.mean_loss,
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        progress(&r);
        reports.push(r);
        clock = Instant::now();
        Ok(())
    })?;
    Ok((net, reports))
}

fn predictions(
    fold: usize,
    samples: &[Sample],
    idx: &[usize],
    out: &[ModelOutput],
) -> Vec<Prediction> {
    idx.iter()
        .zip(out)
        .map(|(&i, o)| {
            let l = &samples[i].label;
            Prediction {
                fold,
                id: samples[i].id.clone(),
                aac24_score: o.aac24_score,
                cumulative: l.cumulative,
                predicted_risk: predicted_risk(o.aac24_score).name().into(),
                risk: l.risk.name().into(),
                granular: l.granular,
                predicted_granular: o.granular_classes,
            }
        })
        .collect()
}

/// Runs every fold (up to `cfg.threads` at a time), then the optional fit on
/// all samples. Divergence in any fold aborts the run.
pub fn cross_validate(
    samples: &[Sample],
    cfg: &RunConfig,
    progress: &(dyn Fn(&EpochReport) + Sync),
) -> Result<RunOutcome> {
    cfg.train.validate()?;
    cfg.model.validate()?;
    let risks: Vec<_> = samples.iter().map(|s| s.label.risk).collect();
    let folds = stratified_kfold(&risks, cfg.train.folds, cfg.train.seed)?;
    let outcomes = par_map(&folds, cfg.threads, |k, f| -> Result<FoldOutcome> {
        let (model, epochs) = fit(samples, &f.train, cfg, k, progress)?;
        let out = evaluate(&model, samples, &f.test, cfg.train.batch_size)?;
        let labels: Vec<AacLabel> = f.test.iter().map(|&i| samples[i].label).collect();
        Ok(FoldOutcome {
            fold: k,
            train_size: f.train.len(),
            epochs,
            predictions: predictions(k, samples, &f.test, &out),
            metrics: MetricsReport::from_predictions(&out, &labels)?,
            outputs: out,
            labels,
            model,
        })
    });
    let folds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let outs: Vec<ModelOutput> = folds
        .iter()
        .flat_map(|f| f.outputs.iter().cloned())
        .collect();
    let labels: Vec<AacLabel> = folds
        .iter()
        .flat_map(|f| f.labels.iter().copied())
        .collect();
    let pooled = MetricsReport::from_predictions(&outs, &labels)?;
    let final_model = if cfg.final_fit {
        let all: Vec<usize> = (0..samples.len()).collect();
        Some(fit(samples, &all, cfg, cfg.train.folds, progress)?)
    } else {
        None
    };
    Ok(RunOutcome {
        folds,
        pooled,
        final_model,
    })
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r).expect("plain struct serializes"));
        s.push('\n');
    }
    s
}

/// Writes reports, predictions, metrics and checkpoints into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, run: &RunOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).at(dir)?;
    let mut epochs: Vec<EpochReport> = run
        .folds
        .iter()
        .flat_map(|f| f.epochs.iter().copied())
        .collect();
    if let Some((_, e)) = &run.final_model {
        epochs.extend(e);
    }
    let path = dir.join("reports.jsonl");
    fs::write(&path, jsonl(epochs)).at(&path)?;
    let path = dir.join("predictions.jsonl");
    fs::write(
        &path,
        jsonl(run.folds.iter().flat_map(|f| f.predictions.iter())),
    )
    .at(&path)?;
    let folds: Vec<_> = run
        .folds
        .iter()
        .map(|f| {
            json!({
                "fold": f.fold,
                "train_size": f.train_size,
                "final_loss": f.final_loss(),
                "metrics": metrics_json(&f.metrics),
            })
        })
        .collect();
    let summary = json!({ "folds": folds, "pooled": metrics_json(&run.pooled) });
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&summary).expect("json values serialize") + "\n";
    fs::write(&path, text).at(&path)?;
    for f in &run.folds {
        save_checkpoint(&f.model, dir.join(format!("fold{}.aacl", f.fold)))?;
    }
    if let Some((m, _)) = &run.final_model {
        save_checkpoint(m, dir.join("final.aacl"))?;
    }
    Ok(())
}
