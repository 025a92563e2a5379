use alloc::vec::Vec;

use crate::data::{score_to_risk, AacLabel, Risk, MAX_CUMULATIVE};
use crate::error::{bail, Result};
use crate::model::ModelOutput;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion(pub [[u64; 3]; 3]);

impl Confusion {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// TP, FP, FN, TN of class `c` against the rest.
    pub fn collapse(&self, c: usize) -> [u64; 4] {
        let tp = self.0[c][c];
        let fn_ = self.0[c].iter().sum::<u64>() - tp;
        let fp = (0..3).map(|t| self.0[t][c]).sum::<u64>() - tp;
        [tp, fp, fn_, self.total() - tp - fp - fn_]
    }
}

pub fn confusion_matrix(pred: &[Risk], truth: &[Risk]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        bail!(
            Data,
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        );
    }
    let mut m = Confusion::default();
    for (p, t) in pred.iter().zip(truth) {
        m.0[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// One-vs-rest rates; `None` where the ratio is 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassRates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub ppv: Option<f64>,
}

impl ClassRates {
    pub const NAMES: [&'static str; 5] = ["Accuracy", "Sensitivity", "Specificity", "NPV", "PPV"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.npv,
            self.ppv,
        ]
    }

    fn from_values(v: [Option<f64>; 5]) -> Self {
        Self {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            npv: v[3],
            ppv: v[4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneVsRest {
    /// Low, Moderate, High.
    pub per_class: [ClassRates; 3],
    /// Unweighted mean over the classes where each rate is defined.
    pub mean: ClassRates,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn one_vs_rest_metrics(m: &Confusion) -> Result<OneVsRest> {
    let n = m.total();
    if n == 0 {
        bail!(Degenerate, "empty confusion matrix");
    }
    let per_class: [ClassRates; 3] = core::array::from_fn(|c| {
        let [tp, fp, fn_, tn] = m.collapse(c);
        ClassRates {
            accuracy: ratio(tp + tn, n),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            npv: ratio(tn, tn + fn_),
            ppv: ratio(tp, tp + fp),
        }
    });
    let mean = core::array::from_fn(|k| {
        let defined: Vec<f64> = per_class.iter().filter_map(|r| r.values()[k]).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    });
    Ok(OneVsRest {
        per_class,
        mean: ClassRates::from_values(mean),
    })
}

fn moments(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() {
        bail!(Data, "length mismatch: {} vs {}", x.len(), y.len());
    }
    if x.len() < 2 {
        bail!(Data, "need at least 2 points, got {}", x.len());
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        bail!(Data, "non-finite values");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy, sxx, syy))
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    let (sxy, sxx, syy) = moments(x, y)?;
    if sxx == 0.0 || syy == 0.0 {
        bail!(Degenerate, "Pearson r of a constant sequence");
    }
    Ok(sxy / crate::math::sqrt(sxx * syy))
}

/// `1 - SS_res / SS_tot` about the identity line.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    let (_, _, ss_tot) = moments(pred, target)?;
    if ss_tot == 0.0 {
        bail!(Degenerate, "R^2 of a constant target");
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Risk of the predicted cumulative score rounded to the nearest integer.
pub fn predicted_risk(aac24: f64) -> Risk {
    let s = crate::math::round(aac24.clamp(0.0, f64::from(MAX_CUMULATIVE)));
    score_to_risk(s as i64).expect("clamped into range")
}

/// Risk-level and score-level evaluation of a prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rates: OneVsRest,
    pub confusion: Confusion,
    /// `None` when either side is constant.
    pub pearson_r: Option<f64>,
    pub r_squared: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    /// Compares predicted AAC-24 scores with true cumulative scores.
    pub fn from_predictions(outputs: &[ModelOutput], labels: &[AacLabel]) -> Result<Self> {
        if outputs.len() != labels.len() {
            bail!(
                Data,
                "{} predictions for {} labels",
                outputs.len(),
                labels.len()
            );
        }
        let pred: Vec<f64> = outputs.iter().map(|o| o.aac24_score).collect();
        let truth: Vec<f64> = labels.iter().map(|l| f64::from(l.cumulative)).collect();
        let pr: Vec<Risk> = pred.iter().map(|&p| predicted_risk(p)).collect();
        let tr: Vec<Risk> = labels.iter().map(|l| l.risk).collect();
        let confusion = confusion_matrix(&pr, &tr)?;
        let soft = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(crate::Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            rates: one_vs_rest_metrics(&confusion)?,
            confusion,
            pearson_r: soft(pearson_r(&pred, &truth))?,
            r_squared: soft(r_squared(&pred, &truth))?,
            n: labels.len(),
        })
    }
}
