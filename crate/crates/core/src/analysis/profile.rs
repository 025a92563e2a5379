use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{ConvSpec, ModelConfig, NUM_CLASSES, NUM_GROUPS, NUM_OUTPUTS};

/// FLOPs charged per element for norms, activations and softmax.
pub const ELEMENTWISE_FLOPS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        Self {
            total_params: layers.iter().map(|l| l.params).sum(),
            total_flops: layers.iter().map(|l| l.flops).sum(),
            layers,
        }
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

struct Sheet(Vec<LayerCost>);

impl Sheet {
    fn push(&mut self, name: impl ToString, params: u64, flops: u64, output_shape: &[usize]) {
        self.0.push(LayerCost {
            name: name.to_string(),
            params,
            flops,
            output_shape: output_shape.to_vec(),
        });
    }

    fn conv(&mut self, c: &ConvSpec) -> [usize; 3] {
        let (k2, out) = ((c.kernel * c.kernel) as u64, c.out_ch as u64);
        let fan_in = if c.depthwise { 1 } else { c.in_ch as u64 };
        let pixels = (c.out_hw.0 * c.out_hw.1) as u64;
        let shape = [c.out_ch, c.out_hw.0, c.out_hw.1];
        self.push(
            &c.name,
            out * fan_in * k2,
            2 * pixels * out * fan_in * k2,
            &shape,
        );
        shape
    }

    fn elementwise(&mut self, name: impl ToString, params: u64, per: u64, shape: &[usize]) {
        let n: u64 = shape.iter().map(|&d| d as u64).product();
        self.push(name, params, per * n, shape);
    }

    /// Conv, batch norm and activation, as used by the stem, head and blocks.
    fn conv_bn(&mut self, c: &ConvSpec, act: bool) {
        let shape = self.conv(c);
        self.elementwise(
            format!("{}.bn", c.name),
            2 * c.out_ch as u64,
            ELEMENTWISE_FLOPS,
            &shape,
        );
        if act {
            self.elementwise(format!("{}.act", c.name), 0, ELEMENTWISE_FLOPS, &shape);
        }
    }

    fn linear(
        &mut self,
        name: impl ToString,
        tokens: usize,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) {
        let (t, i, o) = (tokens as u64, d_in as u64, d_out as u64);
        let b = u64::from(bias);
        self.push(
            name,
            i * o + b * o,
            2 * t * i * o + b * t * o,
            &[tokens, d_out],
        );
    }
}

/// Static per-layer cost of `cfg`.
///
/// One multiply-accumulate is 2 FLOPs; norms, activations and softmax cost
/// [`ELEMENTWISE_FLOPS`] per element; residual adds, gating products, the
/// attention temperature and pooling cost 1 per element. Parameters are
/// trainable scalars only (batch-norm running statistics excluded).
pub fn profile(cfg: &ModelConfig) -> Result<CostReport> {
    let plan = cfg.plan()?;
    let mut s = Sheet(Vec::new());
    s.conv_bn(&plan.stem, true);
    for b in &plan.blocks {
        s.conv_bn(&b.expand, true);
        s.conv_bn(&b.depthwise, true);
        s.conv_bn(&b.project, false);
        if b.use_residual {
            let shape = [b.project.out_ch, b.project.out_hw.0, b.project.out_hw.1];
            s.elementwise(format!("{}.residual", b.name), 0, 1, &shape);
        }
    }
    s.conv_bn(&plan.head, true);

    let (t, d, heads) = (cfg.token_count, plan.d, cfg.heads);
    let (tu, du, hu) = (t as u64, d as u64, heads as u64);
    let bias = cfg.attn_bias;
    s.elementwise("sam.ln", 2 * du, ELEMENTWISE_FLOPS, &[t, d]);
    for n in ["q", "k", "v"] {
        s.linear(format!("sam.{n}"), t, d, d, bias);
    }
    s.push("sam.scores", 0, 2 * tu * tu * du, &[heads, t, t]);
    s.push("sam.alpha", 1, hu * tu * tu, &[heads, t, t]);
    s.elementwise("sam.softmax", 0, ELEMENTWISE_FLOPS, &[heads, t, t]);
    s.push("sam.mix", 0, 2 * tu * tu * du, &[t, d]);
    if cfg.sam_out_proj {
        s.linear("sam.out", t, d, d, bias);
    }
    s.elementwise("sam.residual", 0, 1, &[t, d]);

    s.elementwise("gffm.ln", 2 * du, ELEMENTWISE_FLOPS, &[t, d]);
    s.linear("gffm.w1", t, d, d, bias);
    s.elementwise("gffm.gelu", 0, ELEMENTWISE_FLOPS, &[t, d]);
    s.linear("gffm.w2", t, d, d, bias);
    s.elementwise("gffm.gate", 0, 1, &[t, d]);
    s.linear("gffm.wo", t, d, d, bias);
    s.elementwise("gffm.residual", 0, 1, &[t, d]);

    s.push("pool", 0, tu * du, &[d]);
    s.linear("fc", 1, d, NUM_OUTPUTS, true);
    s.elementwise("sigmoid", 0, ELEMENTWISE_FLOPS, &[1]);
    s.elementwise("softmax", 0, ELEMENTWISE_FLOPS, &[NUM_GROUPS, NUM_CLASSES]);
    Ok(CostReport::from_layers(s.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AacLiteNet, StageSpec};
    use crate::nn::Activation;

    #[test]
    fn head_linear_closed_form() {
        let r = profile(&ModelConfig::default()).unwrap();
        let fc = r.layer("fc").unwrap();
        assert_eq!(fc.params, 50_721);
        assert_eq!(fc.flops, 101_376 + 33);
    }

    #[test]
    fn sam_qkv_at_default_size() {
        let r = profile(&ModelConfig::default()).unwrap();
        let qkv: u64 = ["sam.q", "sam.k", "sam.v"]
            .iter()
            .map(|n| r.layer(n).unwrap().flops)
            .sum();
        // bias adds are T * D per projection
        assert_eq!(qkv - 3 * 81 * 1536, 1_146_617_856);
    }

    #[test]
    fn totals_are_additive_and_order_free() {
        let r = profile(&ModelConfig::desk(64)).unwrap();
        let mut rev = r.layers.clone();
        rev.reverse();
        let again = CostReport::from_layers(rev);
        assert_eq!(
            (again.total_params, again.total_flops),
            (r.total_params, r.total_flops)
        );
    }

    #[test]
    fn parameter_count_matches_built_models() {
        for cfg in [
            ModelConfig::shrunken(),
            ModelConfig::desk(64),
            ModelConfig::desk(96),
        ] {
            let net = AacLiteNet::build(&cfg).unwrap();
            assert_eq!(profile(&cfg).unwrap().total_params, net.num_params() as u64);
        }
        let mut cfg = ModelConfig::shrunken();
        cfg.sam_out_proj = true;
        cfg.attn_bias = false;
        cfg.heads = 4;
        let net = AacLiteNet::build(&cfg).unwrap();
        assert_eq!(profile(&cfg).unwrap().total_params, net.num_params() as u64);
    }

    /// A two-layer network counted by hand: one 3x3 stride-2 stem and one
    /// expand-1 block on an 8x8 single-channel input.
    #[test]
    fn hand_sheet() {
        let cfg = ModelConfig {
            input_h: 8,
            input_w: 8,
            in_channels: 1,
            stem_out: 2,
            stem_kernel: 3,
            stem_stride: 2,
            stages: alloc::vec![StageSpec::new(1, 3, 2, 1, 4)],
            head_channels: 4,
            token_count: 4,
            heads: 1,
            sam_out_proj: false,
            attn_bias: false,
            activation: Activation::Silu,
            ..ModelConfig::default()
        };
        let r = profile(&cfg).unwrap();
        // stem: 8x8 -> 4x4, 2 filters of 1x3x3
        let stem = 2 * 9;
        let stem_f = 2 * 16 * 2 * 9 + 5 * 32 + 5 * 32;
        // block: expand 2->2 (1x1, 4x4), dw 3x3 s2 (4x4 -> 2x2), project 2->4
        let blk = 2 * 2 + 2 * 9 + 2 * 4;
        let blk_f =
            (2 * 16 * 2 * 2 + 10 * 32) + (2 * 4 * 2 * 9 + 10 * 8) + (2 * 4 * 4 * 2 + 5 * 16);
        let bn = 2 * 2 + 2 * 2 + 2 * 2 + 2 * 4;
        // head 4->4 on 2x2, then attention with T=4, D=4
        let head = 16 + 2 * 4;
        let head_f = 2 * 4 * 4 * 4 + 10 * 16;
        let sam = 2 * 4 + 3 * 16 + 1;
        let sam_f = 5 * 16 + 3 * (2 * 4 * 16) + 2 * 16 * 4 + 16 + 5 * 16 + 2 * 16 * 4 + 16;
        let gffm = 2 * 4 + 3 * 16;
        let gffm_f = 5 * 16 + 3 * (2 * 4 * 16) + 5 * 16 + 16 + 16;
        let tail = 4 * 33 + 33;
        let tail_f = 16 + (2 * 4 * 33 + 33) + 5 + 5 * 32;
        assert_eq!(
            r.total_params,
            (stem + blk + bn + head + sam + gffm + tail) as u64
        );
        assert_eq!(
            r.total_flops,
            (stem_f + blk_f + head_f + sam_f + gffm_f + tail_f) as u64
        );
        assert_eq!(
            r.total_params,
            AacLiteNet::build(&cfg).unwrap().num_params() as u64
        );
    }
}
