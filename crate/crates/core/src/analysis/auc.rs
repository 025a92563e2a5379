use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// ROC AUC with the threshold-sweep curve from `(0, 0)` to `(1, 1)` as
/// `(false positive rate, true positive rate)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

fn class_sizes(scores: &[f64], outcomes: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != outcomes.len() {
        bail!(
            Data,
            "{} scores for {} outcomes",
            scores.len(),
            outcomes.len()
        );
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail!(Data, "non-finite score");
    }
    let pos = outcomes.iter().filter(|&&o| o).count();
    let neg = outcomes.len() - pos;
    if pos == 0 || neg == 0 {
        bail!(
            Degenerate,
            "ROC analysis needs both outcome classes ({} positive, {} negative)",
            pos,
            neg
        );
    }
    Ok((pos, neg))
}

/// Midranks (1-based, ties averaged).
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = alloc::vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mid;
        }
        i = j + 1;
    }
    r
}

/// Mann–Whitney AUC (ties count one half) and the ROC curve.
pub fn roc_auc(scores: &[f64], outcomes: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = class_sizes(scores, outcomes)?;
    let r = ranks(scores);
    let rank_sum: f64 = r
        .iter()
        .zip(outcomes)
        .filter(|(_, &o)| o)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (pos as f64, neg as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = alloc::vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if outcomes[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(RocCurve { auc, points })
}

/// Brute-force AUC over all positive/negative pairs.
pub fn auc_pair_count(scores: &[f64], outcomes: &[bool]) -> Result<f64> {
    let (pos, neg) = class_sizes(scores, outcomes)?;
    let mut wins = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !outcomes[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if outcomes[j] {
                continue;
            }
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos * neg) as f64)
}

/// Hanley–McNeil standard error of an AUC.
pub fn hanley_se(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let (p, n) = (n_pos as f64, n_neg as f64);
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let var =
        (auc * (1.0 - auc) + (p - 1.0) * (q1 - auc * auc) + (n - 1.0) * (q2 - auc * auc)) / (p * n);
    math::sqrt(var.max(0.0))
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    super::pearson_r(&ranks(x), &ranks(y))
}

/// Inverse standard normal CDF by bisection.
pub fn inverse_norm_cdf(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if math::norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Row keys of the correlation table: average score correlation 0.02..0.90.
pub const TABLE_RS: [f64; 45] = {
    let mut r = [0.0; 45];
    let mut i = 0;
    while i < 45 {
        r[i] = (i + 1) as f64 * 0.02;
        i += 1;
    }
    r
};

/// Column keys: average AUC 0.700..0.975.
pub const TABLE_AUCS: [f64; 12] = {
    let mut a = [0.0; 12];
    let mut i = 0;
    while i < 12 {
        a[i] = 0.7 + i as f64 * 0.025;
        i += 1;
    }
    a
};

/// Integral of `exp(-h^2 / (1 + t)) / sqrt(1 - t^2)` over `[0, c]`
/// (composite Simpson; the integrand is smooth for `c <= 1/2`).
fn orthant_increment(h: f64, c: f64) -> f64 {
    const N: usize = 256;
    let g = |t: f64| math::exp(-h * h / (1.0 + t)) / math::sqrt(1.0 - t * t);
    let step = c / N as f64;
    let mut sum = g(0.0) + g(c);
    for i in 1..N {
        sum += g(i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * step / 3.0
}

/// Correlation between two AUC estimates whose underlying scores correlate
/// by `r` in both classes, under the binormal model with common AUC `auc`.
///
/// For a positive case with latent scores `(Xa, Xb)` the placement values are
/// `Phi(Xa)` and `Phi(Xb)`; their covariance is `Phi2(h, h; r/2) - auc^2`
/// with `h = Phi^-1(auc)`, and their variance the same at `r = 1`.
fn binormal_auc_correlation(r: f64, auc: f64) -> f64 {
    let h = inverse_norm_cdf(auc);
    orthant_increment(h, r / 2.0) / orthant_increment(h, 0.5)
}

/// The correlation lookup table, rows [`TABLE_RS`], columns [`TABLE_AUCS`].
pub fn mcneil_hanley_table() -> Vec<[f64; 12]> {
    TABLE_RS
        .iter()
        .map(|&r| TABLE_AUCS.map(|a| binormal_auc_correlation(r, a)))
        .collect()
}

fn bracket(keys: &[f64], x: f64) -> (usize, f64) {
    let last = keys.len() - 1;
    let x = x.clamp(keys[0], keys[last]);
    let i = keys
        .iter()
        .rposition(|&k| k <= x)
        .unwrap_or(0)
        .min(last - 1);
    (i, (x - keys[i]) / (keys[i + 1] - keys[i]))
}

/// Bilinear lookup of the AUC correlation. Keys outside the table are
/// clamped; an average score correlation below 0.02 interpolates linearly
/// towards 0 at 0.
pub fn mcneil_hanley_r(table: &[[f64; 12]], r_avg: f64, auc_avg: f64) -> f64 {
    let (j, u) = bracket(&TABLE_AUCS, auc_avg);
    let row = |i: usize| table[i][j] + (table[i][j + 1] - table[i][j]) * u;
    if r_avg < TABLE_RS[0] {
        return row(0) * (r_avg.max(0.0) / TABLE_RS[0]);
    }
    let (i, v) = bracket(&TABLE_RS, r_avg);
    row(i) + (row(i + 1) - row(i)) * v
}

/// Correlated comparison of two AUCs on the same cases.
#[derive(Debug, Clone, PartialEq)]
pub struct AucComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub se_a: f64,
    pub se_b: f64,
    /// Average within-class rank correlation of the two score sets.
    pub score_correlation: f64,
    /// Correlation between the two AUC estimates, from the table.
    pub correlation_r: f64,
    pub z_statistic: f64,
    pub p_value: f64,
    /// The variance under the square root was not positive and was clamped.
    pub variance_clamped: bool,
}

const VARIANCE_FLOOR: f64 = 1e-12;

pub fn compare_auc_mcneil_hanley(a: &[f64], b: &[f64], outcomes: &[bool]) -> Result<AucComparison> {
    let (pos, neg) = class_sizes(a, outcomes)?;
    class_sizes(b, outcomes)?;
    let (auc_a, auc_b) = (roc_auc(a, outcomes)?.auc, roc_auc(b, outcomes)?.auc);
    let (se_a, se_b) = (hanley_se(auc_a, pos, neg), hanley_se(auc_b, pos, neg));
    let within = |class: bool| {
        let xa: Vec<f64> = a
            .iter()
            .zip(outcomes)
            .filter(|(_, &o)| o == class)
            .map(|(v, _)| *v)
            .collect();
        let xb: Vec<f64> = b
            .iter()
            .zip(outcomes)
            .filter(|(_, &o)| o == class)
            .map(|(v, _)| *v)
            .collect();
        match spearman(&xa, &xb) {
            Ok(r) => r,
            Err(_) if xa == xb => 1.0,
            Err(_) => 0.0,
        }
    };
    let score_correlation = (within(true) + within(false)) / 2.0;
    let correlation_r = mcneil_hanley_r(
        &mcneil_hanley_table(),
        score_correlation,
        (auc_a + auc_b) / 2.0,
    );
    let mut var = se_a * se_a + se_b * se_b - 2.0 * correlation_r * se_a * se_b;
    let variance_clamped = var <= 0.0;
    if variance_clamped {
        var = VARIANCE_FLOOR;
    }
    let z = if auc_a == auc_b {
        0.0
    } else {
        (auc_a - auc_b) / math::sqrt(var)
    };
    Ok(AucComparison {
        auc_a,
        auc_b,
        se_a,
        se_b,
        score_correlation,
        correlation_r,
        z_statistic: z,
        p_value: math::two_sided_p(z),
        variance_clamped,
    })
}
