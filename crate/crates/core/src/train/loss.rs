use alloc::vec::Vec;

use crate::data::{AacLabel, Risk};
use crate::error::{bail, Result};
use crate::model::{ForwardVars, ModelOutput, NUM_CLASSES, NUM_GROUPS};
use crate::tensor::{Tape, Tensor, Var};

pub const CCE_FLOOR: f64 = 1e-12;
pub const CLASS_WEIGHT_CAP: f64 = 50.0;

/// How the regression weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegWeighting {
    /// 1 for every sample.
    #[default]
    Constant,
    /// Inverse frequency of the sample's risk category.
    PerRisk,
}

impl RegWeighting {
    pub fn name(self) -> &'static str {
        match self {
            RegWeighting::Constant => "constant",
            RegWeighting::PerRisk => "per-risk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(RegWeighting::Constant),
            "per-risk" => Some(RegWeighting::PerRisk),
            _ => None,
        }
    }
}

/// Weights of the combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Regression weight keyed by risk category (Low, Moderate, High).
    pub w_reg: [f64; 3],
    /// Class weights for each granular group, in group order.
    pub class: [[f64; NUM_CLASSES]; NUM_GROUPS],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl LossWeights {
    pub fn uniform() -> Self {
        Self {
            w_reg: [1.0; 3],
            class: [[1.0; NUM_CLASSES]; NUM_GROUPS],
        }
    }

    pub fn reg_weight(&self, risk: Risk) -> f64 {
        self.w_reg[risk.index()]
    }

    /// Every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w_reg: self.w_reg.map(|w| w * factor),
            class: self.class.map(|row| row.map(|w| w * factor)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.w_reg.iter().chain(self.class.iter().flatten());
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            bail!(Config, "loss weights must be finite and non-negative");
        }
        if let Some(g) = self
            .class
            .iter()
            .position(|row| row.iter().all(|&w| w == 0.0))
        {
            bail!(Config, "class weights of group {} are all zero", g);
        }
        Ok(())
    }
}

/// `w * (pred - target)^2`.
pub fn weighted_mse(pred: f64, target: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        bail!(Data, "regression target {} outside [0, 1]", target);
    }
    let d = pred - target;
    Ok(w * d * d)
}

/// `-weights[target] * ln(probs[target] + 1e-12)`.
pub fn weighted_cce(probs: &[f64], target: usize, weights: &[f64]) -> Result<f64> {
    if probs.len() != NUM_CLASSES || weights.len() != NUM_CLASSES {
        bail!(
            Shape,
            "expected {} probabilities and weights, got {} and {}",
            NUM_CLASSES,
            probs.len(),
            weights.len()
        );
    }
    if target >= NUM_CLASSES {
        bail!(Data, "class {} outside 0..{}", target, NUM_CLASSES);
    }
    Ok(-weights[target] * crate::math::ln(probs[target] + CCE_FLOOR))
}

/// Half the sum of the weighted regression term and the eight weighted
/// cross-entropy terms.
pub fn total_loss(out: &ModelOutput, label: &AacLabel, lw: &LossWeights) -> Result<f64> {
    label.validate()?;
    let mut sum = weighted_mse(
        out.regression,
        label.regression_target(),
        lw.reg_weight(label.risk),
    )?;
    for g in 0..NUM_GROUPS {
        sum += weighted_cce(
            &out.granular_probs[g],
            usize::from(label.granular[g]),
            &lw.class[g],
        )?;
    }
    Ok(sum / 2.0)
}

/// Batch mean of [`total_loss`], recorded on `tape` from a forward pass.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ForwardVars,
    labels: &[AacLabel],
    lw: &LossWeights,
) -> Result<Var> {
    let n = labels.len();
    if n == 0
        || tape.shape(vars.regression) != [n, 1]
        || tape.shape(vars.probs) != [n, NUM_GROUPS, NUM_CLASSES]
    {
        bail!(
            Shape,
            "{} labels for regression {:?} and probabilities {:?}",
            n,
            tape.shape(vars.regression),
            tape.shape(vars.probs)
        );
    }
    let mut targets = Vec::with_capacity(n);
    let mut reg_w = Vec::with_capacity(n);
    let mut picks = Vec::with_capacity(n * NUM_GROUPS);
    let mut cce_w = Vec::with_capacity(n * NUM_GROUPS);
    for (i, l) in labels.iter().enumerate() {
        l.validate()?;
        targets.push(l.regression_target());
        reg_w.push(lw.reg_weight(l.risk));
        for g in 0..NUM_GROUPS {
            let c = usize::from(l.granular[g]);
            picks.push((i * NUM_GROUPS + g) * NUM_CLASSES + c);
            cce_w.push(-lw.class[g][c]);
        }
    }
    let target = tape.constant(Tensor::from_vec(&[n, 1], targets)?);
    let reg_w = tape.constant(Tensor::from_vec(&[n, 1], reg_w)?);
    let cce_w = tape.constant(Tensor::from_vec(&[n * NUM_GROUPS], cce_w)?);

    let d = tape.sub(vars.regression, target)?;
    let sq = tape.square(d)?;
    let reg = tape.mul(sq, reg_w)?;
    let reg = tape.sum(reg)?;

    let p = tape.gather(vars.probs, &picks)?;
    let p = tape.add_scalar(p, CCE_FLOOR)?;
    let lp = tape.ln(p)?;
    let cce = tape.mul(lp, cce_w)?;
    let cce = tape.sum(cce)?;

    let total = tape.add(reg, cce)?;
    tape.scale(total, 0.5 / n as f64)
}

/// Inverse-frequency class weights `N / (4 * max(count, 1))` per group, capped
/// at 50. The regression weight is 1, or with [`RegWeighting::PerRisk`]
/// `N / (3 * max(count, 1))` per risk category under the same cap.
pub fn compute_class_weights(labels: &[AacLabel], reg: RegWeighting) -> Result<LossWeights> {
    if labels.is_empty() {
        bail!(Data, "cannot compute class weights of an empty dataset");
    }
    let n = labels.len() as f64;
    let inv = |count: usize, k: f64| (n / (k * count.max(1) as f64)).min(CLASS_WEIGHT_CAP);
    let mut lw = LossWeights::uniform();
    for g in 0..NUM_GROUPS {
        let mut counts = [0usize; NUM_CLASSES];
        for l in labels {
            counts[usize::from(l.granular[g])] += 1;
        }
        lw.class[g] = counts.map(|c| inv(c, NUM_CLASSES as f64));
    }
    if reg == RegWeighting::PerRisk {
        let mut counts = [0usize; 3];
        for l in labels {
            counts[l.risk.index()] += 1;
        }
        lw.w_reg = counts.map(|c| inv(c, 3.0));
    }
    Ok(lw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AacLiteNet, ModelConfig};
    use crate::nn::Forward;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(g: [u8; 8]) -> AacLabel {
        AacLabel::from_granular(g).unwrap()
    }

    #[test]
    fn mse_cases() {
        assert_eq!(weighted_mse(0.3, 0.3, 5.0).unwrap(), 0.0);
        assert_eq!(weighted_mse(0.5, 0.25, 2.0).unwrap(), 0.125);
        assert!(matches!(
            weighted_mse(0.5, 1.5, 1.0),
            Err(crate::Error::Data(_))
        ));
        assert!(weighted_mse(0.5, -0.1, 1.0).is_err());
    }

    #[test]
    fn cce_cases() {
        let w = [1.0; 4];
        assert!(weighted_cce(&[0.0, 0.0, 1.0, 0.0], 2, &w).unwrap().abs() < 1e-11);
        let u = weighted_cce(&[0.25; 4], 1, &w).unwrap();
        // ln 4 shifted by the floor: -ln(0.25 + 1e-12) = ln 4 - 4e-12
        assert!((u - 1.386_294_361_119_890_6).abs() < 1e-11);
        assert_eq!(
            weighted_cce(&[0.9, 0.1, 0.0, 0.0], 2, &[1.0, 1.0, 0.0, 1.0]).unwrap(),
            0.0
        );
        assert!(matches!(
            weighted_cce(&[0.25; 4], 4, &w),
            Err(crate::Error::Data(_))
        ));
        // floor keeps a zero probability finite
        assert!(weighted_cce(&[1.0, 0.0, 0.0, 0.0], 3, &w)
            .unwrap()
            .is_finite());
    }

    fn output(reg: f64, probs: &[[f64; 4]; 8]) -> ModelOutput {
        let flat: Vec<f64> = probs.iter().flatten().copied().collect();
        ModelOutput::from_parts(reg, &flat)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let l = label([1, 0, 2, 3, 0, 1, 1, 0]);
        let mut probs = [[0.0; 4]; 8];
        for g in 0..8 {
            probs[g][usize::from(l.granular[g])] = 1.0;
        }
        let loss = total_loss(&output(8.0 / 24.0, &probs), &l, &LossWeights::uniform()).unwrap();
        assert!(loss.abs() < 1e-10);
        // the floor pushes -ln(1 + 1e-12) just below zero
        assert!(loss >= -8.0 * CCE_FLOOR);
    }

    #[test]
    fn zeroed_cce_leaves_half_regression() {
        let l = label([3, 3, 0, 0, 0, 0, 0, 0]);
        let mut lw = LossWeights::uniform();
        lw.w_reg = [2.0, 3.0, 4.0];
        for g in 0..8 {
            lw.class[g] = [0.0; 4];
            lw.class[g][(usize::from(l.granular[g]) + 1) % 4] = 1.0;
        }
        let out = output(0.7, &[[0.25; 4]; 8]);
        let want = 4.0 * (0.7f64 - 0.25).powi(2) / 2.0;
        assert!((total_loss(&out, &l, &lw).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn random_case_matches_direct_formula_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let g: [u8; 8] = core::array::from_fn(|_| rng.random_range(0..4));
            let l = label(g);
            let probs: [[f64; 4]; 8] = core::array::from_fn(|_| {
                let raw: [f64; 4] = core::array::from_fn(|_| rng.random_range(0.01..1.0));
                let s: f64 = raw.iter().sum();
                raw.map(|r| r / s)
            });
            let mut lw = LossWeights::uniform();
            lw.w_reg = core::array::from_fn(|_| rng.random_range(0.0..3.0));
            lw.class =
                core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(0.1..3.0)));
            let pred = rng.random_range(0.0..1.0);
            let out = output(pred, &probs);

            let t = f64::from(l.cumulative) / 24.0;
            let mut direct = lw.w_reg[l.risk.index()] * (pred - t) * (pred - t);
            for k in 0..8 {
                let c = g[k] as usize;
                direct += -lw.class[k][c] * (probs[k][c] + 1e-12).ln();
            }
            direct /= 2.0;
            let got = total_loss(&out, &l, &lw).unwrap();
            assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
            let scaled = total_loss(&out, &l, &lw.scaled(3.5)).unwrap();
            assert!((scaled - 3.5 * got).abs() < 1e-12 * scaled.max(1.0));
        }
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let net = AacLiteNet::build(&ModelConfig::shrunken()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let labels = [
            label([0; 8]),
            label([1, 2, 0, 0, 0, 0, 0, 3]),
            label([3; 8]),
        ];
        let mut lw = LossWeights::uniform();
        lw.w_reg = [0.5, 1.0, 2.0];
        lw.class[2] = [0.3, 2.0, 7.0, 1.0];
        let mut f = Forward::new(net.store(), false);
        let xv = f.tape.constant(x.clone());
        let vars = net.forward_vars(&mut f, xv).unwrap();
        let loss = batch_loss(&mut f.tape, &vars, &labels, &lw).unwrap();
        let outs = net.forward_batch(&x, false).unwrap();
        let want: f64 = outs
            .iter()
            .zip(&labels)
            .map(|(o, l)| total_loss(o, l, &lw).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((f.tape.value(loss).item().unwrap() - want).abs() < 1e-12);
        assert!(batch_loss(&mut f.tape, &vars, &labels[..2], &lw).is_err());
    }

    #[test]
    fn untrained_model_sits_at_chance_level() {
        // zero head: sigmoid(0) = 0.5 and uniform groups
        let net = AacLiteNet::build(&ModelConfig::shrunken()).unwrap();
        let x = Tensor::full(&[3, 32, 32], 0.4).unwrap();
        let out = net.forward(&x, false).unwrap();
        let l = label([1, 2, 0, 0, 0, 0, 0, 3]);
        let ln4 = 4f64.ln();
        let want = ((0.5 - 6.0 / 24.0) * (0.5 - 6.0 / 24.0) + 8.0 * ln4) / 2.0;
        assert!((total_loss(&out, &l, &LossWeights::uniform()).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn class_weight_cases() {
        let balanced: Vec<AacLabel> = (0..4u8).map(|c| label([c; 8])).collect();
        let lw = compute_class_weights(&balanced, RegWeighting::Constant).unwrap();
        assert!(lw.class.iter().flatten().all(|&w| (w - 1.0).abs() < 1e-15));
        assert_eq!(lw.w_reg, [1.0; 3]);

        let mut skewed = vec![label([0; 8]); 90];
        skewed.extend(vec![label([1, 0, 0, 0, 0, 0, 0, 0]); 10]);
        let lw = compute_class_weights(&skewed, RegWeighting::Constant).unwrap();
        let want = [100.0 / 360.0, 2.5, 25.0, 25.0];
        for (a, b) in lw.class[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // group 1 has no class-1 samples: 100/4 = 25
        assert_eq!(lw.class[1], [100.0 / 400.0, 25.0, 25.0, 25.0]);

        // duplication invariance holds wherever every count is non-zero
        let mut mixed: Vec<AacLabel> = (0..4u8)
            .flat_map(|c| vec![label([c; 8]); 1 + c as usize])
            .collect();
        mixed.push(label([1, 0, 0, 0, 0, 0, 0, 0]));
        mixed.push(label([1, 1, 0, 0, 0, 0, 0, 0]));
        let doubled: Vec<AacLabel> = mixed.iter().chain(&mixed).copied().collect();
        assert_eq!(
            compute_class_weights(&doubled, RegWeighting::PerRisk).unwrap(),
            compute_class_weights(&mixed, RegWeighting::PerRisk).unwrap()
        );

        let many = vec![label([0; 8]); 1000];
        let lw = compute_class_weights(&many, RegWeighting::PerRisk).unwrap();
        assert_eq!(lw.class[0][3], CLASS_WEIGHT_CAP);
        assert_eq!(lw.w_reg, [1000.0 / 3000.0, 50.0, 50.0]);
        assert!(compute_class_weights(&[], RegWeighting::Constant).is_err());
    }

    #[test]
    fn weight_validation() {
        let mut lw = LossWeights::uniform();
        lw.validate().unwrap();
        lw.class[5] = [0.0; 4];
        assert!(lw.validate().is_err());
        let mut lw = LossWeights::uniform();
        lw.w_reg[1] = -1.0;
        assert!(lw.validate().is_err());
    }
}
