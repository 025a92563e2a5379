use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{bail, Result};
use crate::nn::{conv_output_size, Activation};

/// Granular output groups in head order.
pub const GROUP_ORDER: [&str; 8] = ["L1a", "L2a", "L3a", "L4a", "L1p", "L2p", "L3p", "L4p"];
pub const NUM_GROUPS: usize = 8;
pub const NUM_CLASSES: usize = 4;
pub const NUM_OUTPUTS: usize = 1 + NUM_GROUPS * NUM_CLASSES;

/// `blocks` DWBConv blocks; the first uses `stride`, the rest stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expand: usize,
    pub out: usize,
}

impl StageSpec {
    pub const fn new(
        blocks: usize,
        kernel: usize,
        stride: usize,
        expand: usize,
        out: usize,
    ) -> Self {
        Self {
            blocks,
            kernel,
            stride,
            expand,
            out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    pub stem_out: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    /// Channels after the 1x1 head conv; also the attention width D.
    pub head_channels: usize,
    pub token_count: usize,
    pub num_outputs: usize,
    pub heads: usize,
    pub sam_out_proj: bool,
    pub attn_bias: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 300x300 input, encoder ending at 9x9x1536.
    fn default() -> Self {
        Self {
            input_h: 300,
            input_w: 300,
            in_channels: 3,
            stem_out: 32,
            stem_kernel: 3,
            stem_stride: 2,
            stages: alloc::vec![
                StageSpec::new(1, 3, 1, 1, 16),
                StageSpec::new(2, 3, 2, 6, 24),
                StageSpec::new(2, 5, 2, 6, 40),
                StageSpec::new(3, 3, 2, 6, 80),
                StageSpec::new(3, 5, 1, 6, 112),
                StageSpec::new(3, 5, 2, 6, 384),
                StageSpec::new(2, 3, 1, 6, 480),
            ],
            head_channels: 1536,
            token_count: 81,
            num_outputs: NUM_OUTPUTS,
            heads: 1,
            sam_out_proj: false,
            attn_bias: true,
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 32x32 input, two stages, D = 64 on a 4x4 grid.
    pub fn shrunken() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            stem_out: 8,
            stages: alloc::vec![
                StageSpec::new(1, 3, 2, 2, 12),
                StageSpec::new(2, 3, 2, 2, 16)
            ],
            head_channels: 64,
            token_count: 16,
            ..Self::default()
        }
    }

    /// Narrow encoder for desk-scale training on `size`x`size` inputs.
    pub fn desk(size: usize) -> Self {
        let mut cfg = Self {
            input_h: size,
            input_w: size,
            stem_out: 8,
            stages: alloc::vec![
                StageSpec::new(1, 3, 2, 2, 12),
                StageSpec::new(1, 3, 2, 3, 16),
                StageSpec::new(1, 3, 2, 3, 24),
            ],
            head_channels: 48,
            ..Self::default()
        };
        cfg.token_count = cfg.final_grid().map_or(0, |(h, w)| h * w);
        cfg
    }

    /// Spatial extent after the stem and every stage, without validation.
    pub fn final_grid(&self) -> Option<(usize, usize)> {
        let trace = self.spatial_trace()?;
        trace.last().copied()
    }

    /// `(H, W)` after the stem and after each stage.
    pub fn spatial_trace(&self) -> Option<Vec<(usize, usize)>> {
        let mut hw = (
            conv_output_size(
                self.input_h,
                self.stem_kernel,
                self.stem_stride,
                same_padding(self.input_h, self.stem_kernel, self.stem_stride),
            )?,
            conv_output_size(
                self.input_w,
                self.stem_kernel,
                self.stem_stride,
                same_padding(self.input_w, self.stem_kernel, self.stem_stride),
            )?,
        );
        let mut trace = alloc::vec![hw];
        for s in &self.stages {
            if s.blocks == 0 {
                return None;
            }
            hw = (
                conv_output_size(
                    hw.0,
                    s.kernel,
                    s.stride,
                    same_padding(hw.0, s.kernel, s.stride),
                )?,
                conv_output_size(
                    hw.1,
                    s.kernel,
                    s.stride,
                    same_padding(hw.1, s.kernel, s.stride),
                )?,
            );
            trace.push(hw);
        }
        Some(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h < 2 || self.input_w < 2 || self.in_channels == 0 {
            bail!(Config, "input must be at least 2x2 with one channel");
        }
        if self.stem_out == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            bail!(Config, "stem extents must be positive");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.kernel == 0 || s.stride == 0 || s.expand == 0 || s.out == 0 {
                bail!(Config, "stage {} has a zero extent: {:?}", i, s);
            }
        }
        if self.num_outputs != NUM_OUTPUTS {
            bail!(
                Config,
                "num_outputs must be {}, got {}",
                NUM_OUTPUTS,
                self.num_outputs
            );
        }
        if self.head_channels == 0 || self.heads == 0 || self.head_channels % self.heads != 0 {
            bail!(
                Config,
                "head_channels {} must be a positive multiple of heads {}",
                self.head_channels,
                self.heads
            );
        }
        let Some((h, w)) = self.final_grid() else {
            bail!(Config, "stage table shrinks the input below 1x1");
        };
        if h * w != self.token_count {
            bail!(
                Config,
                "encoder ends at {}x{}x{} ({} tokens), expected {} tokens",
                h,
                w,
                self.head_channels,
                h * w,
                self.token_count
            );
        }
        Ok(())
    }

    /// `key=value` lines; parsed back by [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                format!(
                    "{}x{}x{}x{}x{}",
                    s.blocks, s.kernel, s.stride, s.expand, s.out
                )
            })
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "input_h={}", self.input_h);
        let _ = writeln!(out, "input_w={}", self.input_w);
        let _ = writeln!(out, "in_channels={}", self.in_channels);
        let _ = writeln!(out, "stem_out={}", self.stem_out);
        let _ = writeln!(out, "stem_kernel={}", self.stem_kernel);
        let _ = writeln!(out, "stem_stride={}", self.stem_stride);
        let _ = writeln!(out, "stages={}", stages.join(","));
        let _ = writeln!(out, "head_channels={}", self.head_channels);
        let _ = writeln!(out, "token_count={}", self.token_count);
        let _ = writeln!(out, "num_outputs={}", self.num_outputs);
        let _ = writeln!(out, "heads={}", self.heads);
        let _ = writeln!(out, "sam_out_proj={}", self.sam_out_proj);
        let _ = writeln!(out, "attn_bias={}", self.attn_bias);
        let _ = writeln!(out, "activation={}", self.activation.name());
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "group_order={}", GROUP_ORDER.join(","));
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    Config,
                    "line {}: expected key=value, got {:?}",
                    lineno + 1,
                    line
                );
            };
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| crate::Error::Config(format!("{key}: not an integer: {v:?}")))
            };
            let flag = |v: &str| -> Result<bool> {
                v.parse()
                    .map_err(|_| crate::Error::Config(format!("{key}: not a boolean: {v:?}")))
            };
            match key {
                "input_h" => cfg.input_h = num(value)?,
                "input_w" => cfg.input_w = num(value)?,
                "input_size" => {
                    cfg.input_h = num(value)?;
                    cfg.input_w = cfg.input_h;
                }
                "in_channels" => cfg.in_channels = num(value)?,
                "stem_out" => cfg.stem_out = num(value)?,
                "stem_kernel" => cfg.stem_kernel = num(value)?,
                "stem_stride" => cfg.stem_stride = num(value)?,
                "stages" => cfg.stages = parse_stages(value)?,
                "head_channels" => cfg.head_channels = num(value)?,
                "token_count" => cfg.token_count = num(value)?,
                "num_outputs" => cfg.num_outputs = num(value)?,
                "heads" => cfg.heads = num(value)?,
                "sam_out_proj" => cfg.sam_out_proj = flag(value)?,
                "attn_bias" => cfg.attn_bias = flag(value)?,
                "activation" => {
                    cfg.activation = Activation::parse(value).ok_or_else(|| {
                        crate::Error::Config(format!("unknown activation {value:?}"))
                    })?
                }
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| {
                        crate::Error::Config(format!("seed: not an integer: {value:?}"))
                    })?
                }
                "group_order" => {
                    let got: Vec<&str> = value.split(',').map(str::trim).collect();
                    if got != GROUP_ORDER {
                        bail!(Config, "unsupported group order {:?}", value);
                    }
                }
                _ => bail!(Config, "unknown key {:?}", key),
            }
        }
        Ok(cfg)
    }
}

fn parse_stages(value: &str) -> Result<Vec<StageSpec>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| {
            let parts: Vec<&str> = s.trim().split('x').collect();
            let nums: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
            match nums.as_deref() {
                Some(&[b, k, st, t, o]) => Ok(StageSpec::new(b, k, st, t, o)),
                _ => bail!(
                    Config,
                    "stage must be blocks x kernel x stride x expand x out, got {:?}",
                    s
                ),
            }
        })
        .collect()
}

/// Symmetric padding for a `kernel`/`stride` layer on an `input` extent:
/// the largest `p <= kernel/2` whose output is `floor(input / stride)`,
/// or `kernel/2` if none does.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> usize {
    let target = input / stride.max(1);
    (0..=kernel / 2)
        .rev()
        .find(|&p| conv_output_size(input, kernel, stride, p) == Some(target))
        .unwrap_or(kernel / 2)
}

/// Geometry of one convolution in the built network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl ConvSpec {
    fn new(
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
        in_hw: (usize, usize),
    ) -> Result<Self> {
        let ph = same_padding(in_hw.0, kernel, stride);
        let pw = same_padding(in_hw.1, kernel, stride);
        if ph != pw {
            bail!(
                Config,
                "{}: non-square input {:?} needs unequal padding",
                name,
                in_hw
            );
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(in_hw.0, kernel, stride, ph),
            conv_output_size(in_hw.1, kernel, stride, pw),
        ) else {
            bail!(
                Config,
                "{}: input {:?} too small for kernel {}",
                name,
                in_hw,
                kernel
            );
        };
        Ok(Self {
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: ph,
            depthwise,
            in_hw,
            out_hw: (oh, ow),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub expand: ConvSpec,
    pub depthwise: ConvSpec,
    pub project: ConvSpec,
    pub use_residual: bool,
}

/// Every layer of the network with resolved shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub head: ConvSpec,
    pub grid: (usize, usize),
    pub d: usize,
}

impl ModelConfig {
    pub fn plan(&self) -> Result<Plan> {
        self.validate()?;
        let stem = ConvSpec::new(
            "stem".to_string(),
            self.in_channels,
            self.stem_out,
            self.stem_kernel,
            self.stem_stride,
            false,
            (self.input_h, self.input_w),
        )?;
        let mut hw = stem.out_hw;
        let mut ch = self.stem_out;
        let mut blocks = Vec::new();
        for (si, s) in self.stages.iter().enumerate() {
            for b in 0..s.blocks {
                let name = format!("stage{}.block{}", si + 1, b + 1);
                let stride = if b == 0 { s.stride } else { 1 };
                let e = ch * s.expand;
                let expand = ConvSpec::new(format!("{name}.expand"), ch, e, 1, 1, false, hw)?;
                let dw = ConvSpec::new(format!("{name}.dw"), e, e, s.kernel, stride, true, hw)?;
                let project =
                    ConvSpec::new(format!("{name}.project"), e, s.out, 1, 1, false, dw.out_hw)?;
                let use_residual = stride == 1 && ch == s.out;
                hw = dw.out_hw;
                ch = s.out;
                blocks.push(BlockSpec {
                    name,
                    expand,
                    depthwise: dw,
                    project,
                    use_residual,
                });
            }
        }
        let head = ConvSpec::new("head".to_string(), ch, self.head_channels, 1, 1, false, hw)?;
        Ok(Plan {
            stem,
            blocks,
            head,
            grid: hw,
            d: self.head_channels,
        })
    }
}
