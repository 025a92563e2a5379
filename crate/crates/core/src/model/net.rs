use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BlockSpec, ConvSpec, ModelConfig, Plan, NUM_CLASSES, NUM_GROUPS, NUM_OUTPUTS};
use crate::attention::{attention_block, GffmParams, SamParams};
use crate::error::{bail, Result};
use crate::nn::{Activation, BatchNorm, Conv, Forward, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DwbConvBlockParams {
    pub expand: Conv,
    pub expand_norm: BatchNorm,
    pub dw: Conv,
    pub dw_norm: BatchNorm,
    pub project: Conv,
    pub project_norm: BatchNorm,
    pub use_residual: bool,
}

impl DwbConvBlockParams {
    fn build(store: &mut ParamStore, spec: &BlockSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = &spec.name;
        let e = &spec.expand;
        let d = &spec.depthwise;
        let p = &spec.project;
        Self {
            expand: Conv::new(store, &e.name, e.in_ch, e.out_ch, 1, 1, 0, false, rng),
            expand_norm: BatchNorm::new(store, &format!("{n}.expand_bn"), e.out_ch),
            dw: Conv::depthwise(
                store, &d.name, d.in_ch, d.kernel, d.stride, d.padding, false, rng,
            ),
            dw_norm: BatchNorm::new(store, &format!("{n}.dw_bn"), d.out_ch),
            project: Conv::new(store, &p.name, p.in_ch, p.out_ch, 1, 1, 0, false, rng),
            project_norm: BatchNorm::new(store, &format!("{n}.project_bn"), p.out_ch),
            use_residual: spec.use_residual,
        }
    }
}

/// expand 1x1 (norm, act) -> depthwise kxk (norm, act) -> project 1x1 (norm) -> + x.
pub fn dwbconv_forward(
    f: &mut Forward<'_>,
    x: Var,
    p: &DwbConvBlockParams,
    act: Activation,
) -> Result<Var> {
    let h = p.expand.forward(f, x)?;
    let h = p.expand_norm.forward(f, h)?;
    let h = act.apply(f, h)?;
    let h = p.dw.forward(f, h)?;
    let h = p.dw_norm.forward(f, h)?;
    let h = act.apply(f, h)?;
    let h = p.project.forward(f, h)?;
    let h = p.project_norm.forward(f, h)?;
    if p.use_residual {
        f.tape.add(h, x)
    } else {
        Ok(h)
    }
}

/// Predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Sigmoid output in (0, 1).
    pub regression: f64,
    /// Eight 4-way distributions in group order.
    pub granular_probs: [[f64; NUM_CLASSES]; NUM_GROUPS],
    /// `regression * 24`.
    pub aac24_score: f64,
    /// Per-group argmax.
    pub granular_classes: [u8; NUM_GROUPS],
}

impl ModelOutput {
    pub fn from_parts(regression: f64, probs: &[f64]) -> Self {
        let mut granular_probs = [[0.0; NUM_CLASSES]; NUM_GROUPS];
        let mut granular_classes = [0u8; NUM_GROUPS];
        for (g, chunk) in probs.chunks_exact(NUM_CLASSES).enumerate() {
            granular_probs[g].copy_from_slice(chunk);
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if chunk[c] > chunk[best] {
                    best = c;
                }
            }
            granular_classes[g] = best as u8;
        }
        Self {
            regression,
            granular_probs,
            aac24_score: regression * 24.0,
            granular_classes,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Encoder output `[N, D, h, w]`.
    pub features: Var,
    /// Attention block output, same shape as `features`.
    pub attended: Var,
    /// Head output `[N, 33]`.
    pub logits: Var,
    /// `[N, 1]`
    pub regression: Var,
    /// `[N, 8, 4]`
    pub probs: Var,
}

/// The full network: encoder, attention block, pooling and 33-output head.
#[derive(Debug, Clone, PartialEq)]
pub struct AacLiteNet {
    config: ModelConfig,
    plan: Plan,
    store: ParamStore,
    stem: Conv,
    stem_norm: BatchNorm,
    blocks: Vec<DwbConvBlockParams>,
    head: Conv,
    head_norm: BatchNorm,
    sam: SamParams,
    gffm: GffmParams,
    fc: Linear,
}

fn conv_from(store: &mut ParamStore, s: &ConvSpec, rng: &mut ChaCha8Rng) -> Conv {
    Conv::new(
        store, &s.name, s.in_ch, s.out_ch, s.kernel, s.stride, s.padding, false, rng,
    )
}

impl AacLiteNet {
    /// Deterministic He-uniform initialization from `config.seed`; the
    /// output layer starts at zero.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let stem = conv_from(&mut store, &plan.stem, &mut rng);
        let stem_norm = BatchNorm::new(&mut store, "stem_bn", plan.stem.out_ch);
        let blocks = plan
            .blocks
            .iter()
            .map(|b| DwbConvBlockParams::build(&mut store, b, &mut rng))
            .collect();
        let head = conv_from(&mut store, &plan.head, &mut rng);
        let head_norm = BatchNorm::new(&mut store, "head_bn", plan.head.out_ch);
        let d = plan.d;
        let sam = SamParams::new(
            &mut store,
            "sam",
            d,
            config.heads,
            config.attn_bias,
            config.sam_out_proj,
            &mut rng,
        )?;
        let gffm = GffmParams::new(&mut store, "gffm", d, config.attn_bias, &mut rng);
        let fc = Linear::new(&mut store, "fc", d, NUM_OUTPUTS, true, &mut rng);
        // untrained predictions start at exactly 0.5 and uniform groups
        store.get_mut(fc.weight).data_mut().fill(0.0);
        Ok(Self {
            config: config.clone(),
            plan,
            store,
            stem,
            stem_norm,
            blocks,
            head,
            head_norm,
            sam,
            gffm,
            fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[DwbConvBlockParams] {
        &self.blocks
    }

    pub fn sam(&self) -> &SamParams {
        &self.sam
    }

    pub fn gffm(&self) -> &GffmParams {
        &self.gffm
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    /// Trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Checks `[C,H,W]` / `[N,C,H,W]` against the config and for finiteness.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let ok = match x.shape() {
            [ch, h, w] | [_, ch, h, w] => {
                *ch == c.in_channels && *h == c.input_h && *w == c.input_w
            }
            _ => false,
        };
        if !ok {
            bail!(
                Shape,
                "model expects [{}, {}, {}] (optionally batched), got {:?}",
                c.in_channels,
                c.input_h,
                c.input_w,
                x.shape()
            );
        }
        if !x.all_finite() {
            bail!(Data, "input contains non-finite values");
        }
        Ok(())
    }

    /// Records the network on `f.tape`. `x` is `[N,C,H,W]`.
    pub fn forward_vars(&self, f: &mut Forward<'_>, x: Var) -> Result<ForwardVars> {
        let act = self.config.activation;
        let mut h = self.stem.forward(f, x)?;
        h = self.stem_norm.forward(f, h)?;
        h = act.apply(f, h)?;
        for b in &self.blocks {
            h = dwbconv_forward(f, h, b, act)?;
        }
        h = self.head.forward(f, h)?;
        h = self.head_norm.forward(f, h)?;
        let features = act.apply(f, h)?;
        let attended = attention_block(f, features, &self.sam, &self.gffm)?;
        let pooled = f.tape.global_avg_pool(attended)?;
        let logits = self.fc.forward(f, pooled)?;
        let n = f.tape.shape(logits)[0];
        let reg_logit = f.tape.slice_last(logits, 0, 1)?;
        let regression = f.tape.sigmoid(reg_logit)?;
        let group_logits = f.tape.slice_last(logits, 1, NUM_GROUPS * NUM_CLASSES)?;
        let grouped = f
            .tape
            .reshape(group_logits, &[n, NUM_GROUPS, NUM_CLASSES])?;
        let probs = f.tape.softmax(grouped)?;
        Ok(ForwardVars {
            features,
            attended,
            logits,
            regression,
            probs,
        })
    }

    /// Runs a batch `[N,C,H,W]` (or one `[C,H,W]` image).
    ///
    /// In training mode batch norm uses batch statistics; running
    /// statistics are not updated by this call.
    pub fn forward_batch(&self, x: &Tensor, training: bool) -> Result<Vec<ModelOutput>> {
        self.check_input(x)?;
        let batched = if x.rank() == 3 {
            let mut s = alloc::vec![1];
            s.extend_from_slice(x.shape());
            x.reshaped(&s)?
        } else {
            x.clone()
        };
        let mut f = Forward::new(&self.store, training);
        let xv = f.tape.constant(batched);
        let out = self.forward_vars(&mut f, xv)?;
        let reg = f.tape.value(out.regression).data();
        let probs = f.tape.value(out.probs).data();
        Ok(reg
            .iter()
            .zip(probs.chunks_exact(NUM_GROUPS * NUM_CLASSES))
            .map(|(&r, p)| ModelOutput::from_parts(r, p))
            .collect())
    }

    /// Single-image prediction.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<ModelOutput> {
        if x.rank() != 3 {
            bail!(
                Shape,
                "forward takes one [C,H,W] image, got {:?}",
                x.shape()
            );
        }
        Ok(self.forward_batch(x, training)?.remove(0))
    }

    /// Encoder output for one image, `[D, h, w]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut s = alloc::vec![1];
        s.extend_from_slice(&x.shape()[x.rank() - 3..]);
        let mut f = Forward::new(&self.store, false);
        let xv = f.tape.constant(x.reshaped(&s)?);
        let out = self.forward_vars(&mut f, xv)?;
        let t = f.tape.value(out.features);
        t.reshaped(&t.shape()[1..])
    }

    /// Rebuilds the layer structure for `config` and adopts `store`, which
    /// must hold exactly the entries a fresh build would create.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::build(config)?;
        if store.len() != net.store.len() {
            bail!(
                Config,
                "parameter set has {} entries, config implies {}",
                store.len(),
                net.store.len()
            );
        }
        for (a, b) in store.entries().iter().zip(net.store.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable
            {
                bail!(
                    Config,
                    "parameter {} {:?} does not match config ({} {:?})",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                );
            }
        }
        net.store = store;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    fn tiny() -> ModelConfig {
        ModelConfig::shrunken()
    }

    #[test]
    fn builds_are_deterministic() {
        let a = AacLiteNet::build(&tiny()).unwrap();
        let b = AacLiteNet::build(&tiny()).unwrap();
        assert_eq!(a.store(), b.store());
        let c = AacLiteNet::build(&ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn output_invariants_and_zero_head() {
        let mut net = AacLiteNet::build(&tiny()).unwrap();
        let x = Tensor::from_fn(&[3, 32, 32], |i| ((i * 37) % 101) as f64 / 100.0).unwrap();
        let out = net.forward(&x, false).unwrap();
        assert!(out.regression > 0.0 && out.regression < 1.0);
        for g in &out.granular_probs {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.aac24_score, out.regression * 24.0);

        let fc = net.fc().clone();
        net.store_mut().get_mut(fc.weight).data_mut().fill(0.0);
        net.store_mut()
            .get_mut(fc.bias.unwrap())
            .data_mut()
            .fill(0.0);
        let out = net.forward(&x, false).unwrap();
        assert_eq!(out.regression, 0.5);
        assert_eq!(out.aac24_score, 12.0);
        assert!(out.granular_probs.iter().flatten().all(|&p| p == 0.25));
    }

    #[test]
    fn input_validation() {
        let net = AacLiteNet::build(&tiny()).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[3, 31, 32]).unwrap(), false),
            Err(crate::Error::Shape(_))
        ));
        let mut bad = Tensor::zeros(&[3, 32, 32]).unwrap();
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(
            net.forward(&bad, false),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn dwbconv_identity_path_doubles_input() {
        let spec = BlockSpec {
            name: "b".into(),
            expand: ConvSpec {
                name: "b.expand".into(),
                in_ch: 3,
                out_ch: 3,
                kernel: 1,
                stride: 1,
                padding: 0,
                depthwise: false,
                in_hw: (5, 5),
                out_hw: (5, 5),
            },
            depthwise: ConvSpec {
                name: "b.dw".into(),
                in_ch: 3,
                out_ch: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
                depthwise: true,
                in_hw: (5, 5),
                out_hw: (5, 5),
            },
            project: ConvSpec {
                name: "b.project".into(),
                in_ch: 3,
                out_ch: 3,
                kernel: 1,
                stride: 1,
                padding: 0,
                depthwise: false,
                in_hw: (5, 5),
                out_hw: (5, 5),
            },
            use_residual: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DwbConvBlockParams::build(&mut store, &spec, &mut rng);
        let eye = |id: ParamId, store: &mut ParamStore| {
            let t = store.get_mut(id);
            let k = t.shape()[2] * t.shape()[3];
            let per = t.shape()[1] * k;
            let centre = k / 2;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let (o, rest) = (i / per, i % per);
                let (ci, pos) = (rest / k, rest % k);
                let same = if per == k { true } else { ci == o };
                *v = if same && pos == centre { 1.0 } else { 0.0 };
            }
        };
        eye(p.expand.kernel, &mut store);
        eye(p.dw.kernel, &mut store);
        eye(p.project.kernel, &mut store);
        // neutral norms: running mean 0 and var + eps == 1
        for bn in [&p.expand_norm, &p.dw_norm, &p.project_norm] {
            store.get_mut(bn.running_var).data_mut().fill(1.0 - bn.eps);
        }
        let x = Tensor::from_fn(&[1, 3, 5, 5], |i| (i as f64 * 0.13).sin()).unwrap();
        let mut f = Forward::new(&store, false);
        let xv = f.tape.constant(x.clone());
        let y = dwbconv_forward(&mut f, xv, &p, Activation::Identity).unwrap();
        for (a, b) in f.tape.value(y).data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_block_shape() {
        let cfg = ModelConfig {
            input_h: 300,
            input_w: 300,
            stem_out: 24,
            stages: alloc::vec![super::super::StageSpec::new(1, 3, 2, 6, 32)],
            head_channels: 8,
            token_count: 75 * 75,
            ..ModelConfig::default()
        };
        let plan = cfg.plan().unwrap();
        let b = &plan.blocks[0];
        assert_eq!(b.expand.in_hw, (150, 150));
        assert_eq!(b.expand.out_ch, 144);
        assert_eq!(b.project.out_hw, (75, 75));
        assert!(!b.use_residual);

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DwbConvBlockParams::build(&mut store, b, &mut rng);
        let mut f = Forward::new(&store, false);
        let xv = f.tape.constant(Tensor::zeros(&[1, 24, 150, 150]).unwrap());
        let y = dwbconv_forward(&mut f, xv, &p, Activation::Silu).unwrap();
        assert_eq!(f.tape.shape(y), &[1, 32, 75, 75]);
    }

    #[test]
    fn from_store_rejects_foreign_parameters() {
        let a = AacLiteNet::build(&tiny()).unwrap();
        let other = AacLiteNet::build(&ModelConfig::desk(32)).unwrap();
        assert!(AacLiteNet::from_store(&tiny(), other.store().clone()).is_err());
        let b = AacLiteNet::from_store(&tiny(), a.store().clone()).unwrap();
        assert_eq!(a, b);
    }
}
