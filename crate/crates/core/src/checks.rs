//! Finite-difference gradient suite over every differentiable op, the
//! composite blocks and the end-to-end model.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block, GffmParams, SamParams};
use crate::data::AacLabel;
use crate::error::{bail, Result};
use crate::model::{
    dwbconv_forward, AacLiteNet, DwbConvBlockParams, ModelConfig, NUM_CLASSES, NUM_GROUPS,
    NUM_OUTPUTS,
};
use crate::nn::{he_uniform, Activation, BatchNorm, Conv, Forward, ParamStore};
use crate::tensor::gradcheck::{gradcheck_with, GradcheckOptions, GradcheckReport};
use crate::tensor::{Backward, Tape, Tensor, Var};
use crate::train::{batch_loss, LossWeights};

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const END_TO_END: &str = "end_to_end";

/// Every checked op, in report order.
pub const OP_NAMES: [&str; 36] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "max_last",
    "matmul",
    "matmul_nt",
    "slice_last",
    "concat_last",
    "gather",
    "exp",
    "ln",
    "square",
    "conv2d",
    "depthwise_conv2d",
    "linear",
    "layernorm",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "gelu",
    "silu",
    "sigmoid",
    "softmax",
    "global_avg_pool",
    "sam",
    "sam_log_alpha",
    "gffm",
    "dwbconv",
    "dwbconv_weights",
    "attention_block",
    "batch_loss",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    /// End-to-end check on the 32x32 shrunken model.
    #[default]
    Quick,
    /// End-to-end check on the shrunken stage table at 300x300.
    Full,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Quick => "quick",
            Scale::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quick" => Some(Scale::Quick),
            "full" => Some(Scale::Full),
            _ => None,
        }
    }

    pub fn model_config(self) -> ModelConfig {
        let mut cfg = ModelConfig::shrunken();
        if self == Scale::Full {
            cfg.input_h = 300;
            cfg.input_w = 300;
            cfg.token_count = cfg.final_grid().map_or(0, |(h, w)| h * w);
        }
        cfg
    }

    /// Coordinates sampled per checked tensor in the end-to-end check.
    fn coords(self) -> usize {
        match self {
            Scale::Quick => 24,
            Scale::Full => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub scale: Scale,
    pub seeds: Vec<u64>,
    /// Name of an op whose backward is deliberately corrupted.
    pub sabotage: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            scale: Scale::Quick,
            seeds: DEFAULT_SEEDS.to_vec(),
            sabotage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Label of the case with the largest error.
    pub worst_case: String,
}

impl CheckResult {
    fn collect(name: &str, tol: f64, reports: Vec<(String, GradcheckReport)>) -> Self {
        let mut worst = (String::new(), 0.0);
        for (label, r) in &reports {
            if r.max_rel_error >= worst.1 || r.max_rel_error.is_nan() {
                worst = (label.clone(), r.max_rel_error);
            }
        }
        Self {
            name: name.to_string(),
            cases: reports.len(),
            passed: reports.iter().all(|(_, r)| r.max_rel_error < tol),
            max_rel_error: worst.1,
            tol,
            worst_case: worst.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

/// Identity forward with a deliberately wrong backward (gradient x1.5).
struct Sabotaged;

impl Backward for Sabotaged {
    fn name(&self) -> &'static str {
        "sabotaged"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| g.iter().map(|v| 1.5 * v).collect())]
    }
}

fn sabotage(tape: &mut Tape, v: Var) -> Result<Var> {
    let value = tape.value(v).clone();
    tape.record(value, &[v], Sabotaged)
}

/// Weighted sum with fixed, non-constant weights so every output matters.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = Tensor::from_fn(&shape, |i| crate::math::cos(1.7 * i as f64 + 0.3))?;
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    label: String,
    x: Tensor,
    f: CaseFn,
}

fn rand(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Runs `body` on a [`Forward`] that records onto `tape`.
fn on_tape<T>(
    tape: &mut Tape,
    store: &ParamStore,
    training: bool,
    body: impl FnOnce(&mut Forward<'_>) -> Result<T>,
) -> Result<T> {
    let mut f = Forward::with_tape(core::mem::take(tape), store, training);
    let out = body(&mut f);
    *tape = f.tape;
    out
}

/// Builds cases differentiating the projection of `op(inputs)` with respect
/// to each listed input index in turn, the others held constant.
fn per_input(
    label: &str,
    inputs: Vec<Tensor>,
    wrt: &[usize],
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'static,
) -> Vec<Case> {
    wrt.iter()
        .map(|&k| {
            let consts = inputs.clone();
            let op = op.clone();
            Case {
                label: format!("{label} d/d input{k}"),
                x: inputs[k].clone(),
                f: Box::new(move |t, x| {
                    let vars: Vec<Var> = consts
                        .iter()
                        .enumerate()
                        .map(|(i, c)| if i == k { x } else { t.constant(c.clone()) })
                        .collect();
                    let y = op(t, &vars)?;
                    project(t, y)
                }),
            }
        })
        .collect()
}

fn unary(
    label: &str,
    x: Tensor,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + Clone + 'static,
) -> Vec<Case> {
    per_input(label, vec![x], &[0], move |t, v| op(t, v[0]))
}

const SHAPES_1: [&[usize]; 3] = [&[4], &[2, 3], &[2, 2, 3]];

fn op_cases(op: &str, s: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let label = format!("{op} shape{s}");
    let l = label.as_str();
    let elementwise = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rand(SHAPES_1[s], lo, hi, rng);
    Ok(match op {
        "add" | "sub" | "mul" => {
            let (a, b): (&[usize], &[usize]) =
                [(&[2, 3][..], &[3][..]), (&[4], &[4]), (&[2, 2, 3], &[1])][s];
            let inputs = vec![rand(a, -2.0, 2.0, rng)?, rand(b, -2.0, 2.0, rng)?];
            let kind = op.to_string();
            per_input(l, inputs, &[0, 1], move |t, v| match kind.as_str() {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            })
        }
        "scale" => unary(l, elementwise(rng, -2.0, 2.0)?, |t, v| t.scale(v, -1.7)),
        "add_scalar" => unary(l, elementwise(rng, -2.0, 2.0)?, |t, v| t.add_scalar(v, 0.6)),
        "reshape" => {
            let (from, to): (&[usize], &'static [usize]) = [
                (&[2, 3][..], &[3, 2][..]),
                (&[4], &[2, 2]),
                (&[2, 3, 2], &[12]),
            ][s];
            unary(l, rand(from, -1.0, 1.0, rng)?, move |t, v| t.reshape(v, to))
        }
        "transpose" => {
            let shape: &[usize] = [&[2, 3][..], &[4, 2], &[2, 3, 4]][s];
            unary(l, rand(shape, -1.0, 1.0, rng)?, |t, v| t.transpose(v))
        }
        "sum" => unary(l, elementwise(rng, -1.0, 1.0)?, |t, v| t.sum(v)),
        "mean" => unary(l, elementwise(rng, -1.0, 1.0)?, |t, v| t.mean(v)),
        "max_last" => {
            let shape: &[usize] = [&[4][..], &[2, 5], &[2, 3, 3]][s];
            unary(l, rand(shape, -1.0, 1.0, rng)?, |t, v| Ok(t.max_last(v)?.0))
        }
        "matmul" | "matmul_nt" => {
            let nt = op == "matmul_nt";
            let (a, b): (&[usize], &[usize]) = if nt {
                [
                    (&[2, 3][..], &[4, 3][..]),
                    (&[1, 5], &[2, 5]),
                    (&[2, 2, 3], &[2, 3]),
                ][s]
            } else {
                [
                    (&[2, 3][..], &[3, 4][..]),
                    (&[1, 5], &[5, 2]),
                    (&[2, 2, 3], &[3, 2]),
                ][s]
            };
            let inputs = vec![rand(a, -1.0, 1.0, rng)?, rand(b, -1.0, 1.0, rng)?];
            per_input(l, inputs, &[0, 1], move |t, v| {
                if nt {
                    t.matmul_nt(v[0], v[1])
                } else {
                    t.matmul(v[0], v[1])
                }
            })
        }
        "slice_last" => {
            let (shape, start, len): (&[usize], usize, usize) =
                [(&[2, 5][..], 1, 3), (&[6], 0, 2), (&[2, 2, 4], 2, 2)][s];
            unary(l, rand(shape, -1.0, 1.0, rng)?, move |t, v| {
                t.slice_last(v, start, len)
            })
        }
        "concat_last" => {
            let (a, b): (&[usize], &[usize]) = [
                (&[2, 2][..], &[2, 3][..]),
                (&[3], &[1]),
                (&[2, 1, 2], &[2, 1, 4]),
            ][s];
            let inputs = vec![rand(a, -1.0, 1.0, rng)?, rand(b, -1.0, 1.0, rng)?];
            per_input(l, inputs, &[0, 1], |t, v| t.concat_last(v))
        }
        "gather" => {
            let (shape, idx): (&[usize], &'static [usize]) = [
                (&[2, 3][..], &[5, 0, 0, 2][..]),
                (&[6], &[1, 1, 3]),
                (&[2, 2, 2], &[7, 0, 3]),
            ][s];
            unary(l, rand(shape, -1.0, 1.0, rng)?, move |t, v| {
                t.gather(v, idx)
            })
        }
        "exp" => unary(l, elementwise(rng, -2.0, 2.0)?, |t, v| t.exp(v)),
        "ln" => unary(l, elementwise(rng, 0.5, 2.0)?, |t, v| t.ln(v)),
        "square" => unary(l, elementwise(rng, -2.0, 2.0)?, |t, v| t.square(v)),
        "gelu" => unary(l, elementwise(rng, -3.0, 3.0)?, |t, v| t.gelu(v)),
        "silu" => unary(l, elementwise(rng, -3.0, 3.0)?, |t, v| t.silu(v)),
        "sigmoid" => unary(l, elementwise(rng, -3.0, 3.0)?, |t, v| t.sigmoid(v)),
        "softmax" => unary(l, elementwise(rng, -3.0, 3.0)?, |t, v| t.softmax(v)),
        "conv2d" => {
            let (x, w, bias, stride, pad): (&[usize], &[usize], bool, usize, usize) = [
                (&[1, 2, 5, 5][..], &[3, 2, 3, 3][..], true, 1, 1),
                (&[2, 1, 6, 6], &[2, 1, 3, 3], false, 2, 1),
                (&[3, 4, 4], &[2, 3, 1, 1], true, 1, 0),
            ][s];
            let mut inputs = vec![rand(x, -1.0, 1.0, rng)?, rand(w, -1.0, 1.0, rng)?];
            if bias {
                inputs.push(rand(&[w[0]], -1.0, 1.0, rng)?);
            }
            let wrt: Vec<usize> = (0..inputs.len()).collect();
            per_input(l, inputs, &wrt, move |t, v| {
                t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
            })
        }
        "depthwise_conv2d" => {
            let (x, w, bias, stride, pad): (&[usize], &[usize], bool, usize, usize) = [
                (&[1, 3, 5, 5][..], &[3, 1, 3, 3][..], true, 1, 1),
                (&[2, 2, 6, 6], &[2, 1, 5, 5], false, 2, 2),
                (&[2, 4, 4], &[2, 1, 3, 3], true, 1, 1),
            ][s];
            let mut inputs = vec![rand(x, -1.0, 1.0, rng)?, rand(w, -1.0, 1.0, rng)?];
            if bias {
                inputs.push(rand(&[w[0]], -1.0, 1.0, rng)?);
            }
            let wrt: Vec<usize> = (0..inputs.len()).collect();
            per_input(l, inputs, &wrt, move |t, v| {
                t.depthwise_conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
            })
        }
        "linear" => {
            let (x, w, bias): (&[usize], &[usize], bool) = [
                (&[3, 4][..], &[4, 2][..], true),
                (&[2, 3, 5], &[5, 3], false),
                (&[1, 2], &[2, 2], true),
            ][s];
            let mut inputs = vec![rand(x, -1.0, 1.0, rng)?, rand(w, -1.0, 1.0, rng)?];
            if bias {
                inputs.push(rand(&[w[1]], -1.0, 1.0, rng)?);
            }
            let wrt: Vec<usize> = (0..inputs.len()).collect();
            per_input(l, inputs, &wrt, |t, v| {
                t.linear(v[0], v[1], v.get(2).copied())
            })
        }
        "layernorm" => {
            let shape: &[usize] = [&[2, 4][..], &[3, 2, 5], &[6]][s];
            let d = shape[shape.len() - 1];
            let inputs = vec![
                rand(shape, -2.0, 2.0, rng)?,
                rand(&[d], 0.5, 1.5, rng)?,
                rand(&[d], -0.5, 0.5, rng)?,
            ];
            per_input(l, inputs, &[0, 1, 2], |t, v| {
                t.layernorm(v[0], v[1], v[2], 1e-5)
            })
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let training = op == "batchnorm2d_train";
            let shape: &[usize] = [&[2, 3, 2, 2][..], &[1, 2, 3, 3], &[4, 1, 2, 1]][s];
            let c = shape[1];
            let inputs = vec![
                rand(shape, -2.0, 2.0, rng)?,
                rand(&[c], 0.5, 1.5, rng)?,
                rand(&[c], -0.5, 0.5, rng)?,
            ];
            let mean = rand(&[c], -0.5, 0.5, rng)?.into_data();
            let var = rand(&[c], 0.5, 2.0, rng)?.into_data();
            per_input(l, inputs, &[0, 1, 2], move |t, v| {
                Ok(
                    t.batchnorm2d(v[0], v[1], v[2], &mean, &var, 1e-5, 0.1, training)?
                        .0,
                )
            })
        }
        "global_avg_pool" => {
            let shape: &[usize] = [&[2, 3, 2, 2][..], &[1, 4, 3, 3], &[3, 1, 1, 5]][s];
            unary(l, rand(shape, -1.0, 1.0, rng)?, |t, v| t.global_avg_pool(v))
        }
        "sam" | "sam_log_alpha" => {
            let (n, tokens, heads, out_proj) =
                [(1, 4, 1, false), (2, 4, 2, false), (1, 6, 2, true)][s];
            let d = 8;
            let mut store = ParamStore::new();
            let sam = SamParams::new(&mut store, "sam", d, heads, true, out_proj, rng)?;
            let x = rand(&[n, tokens, d], -1.0, 1.0, rng)?;
            if op == "sam" {
                vec![Case {
                    label: label.clone(),
                    x,
                    f: Box::new(move |t, v| {
                        let y = on_tape(t, &store, false, |f| sam.forward(f, v))?;
                        project(t, y)
                    }),
                }]
            } else {
                let alpha = Tensor::scalar(rng.random_range(-1.0..1.0));
                vec![Case {
                    label: label.clone(),
                    x: alpha,
                    f: Box::new(move |t, a| {
                        let xv = t.constant(x.clone());
                        let y = on_tape(t, &store, false, |f| {
                            f.bind(sam.log_alpha, a);
                            sam.forward(f, xv)
                        })?;
                        project(t, y)
                    }),
                }]
            }
        }
        "gffm" => {
            let (n, tokens, d) = [(1, 4, 8), (2, 3, 4), (1, 5, 6)][s];
            let mut store = ParamStore::new();
            let g = GffmParams::new(&mut store, "gffm", d, true, rng);
            let x = rand(&[n, tokens, d], -1.0, 1.0, rng)?;
            vec![Case {
                label: label.clone(),
                x,
                f: Box::new(move |t, v| {
                    let y = on_tape(t, &store, false, |f| g.forward(f, v))?;
                    project(t, y)
                }),
            }]
        }
        "dwbconv" | "dwbconv_weights" => {
            let (n, cin, cout, k, stride, expand, hw) = [
                (1, 4, 4, 3, 1, 2, 5),
                (2, 3, 5, 3, 2, 1, 6),
                (2, 2, 2, 5, 1, 3, 4),
            ][s];
            let mut store = ParamStore::new();
            let e = cin * expand;
            let pad = k / 2;
            let block = DwbConvBlockParams {
                expand: Conv::new(&mut store, "b.expand", cin, e, 1, 1, 0, false, rng),
                expand_norm: BatchNorm::new(&mut store, "b.expand_bn", e),
                dw: Conv::depthwise(&mut store, "b.dw", e, k, stride, pad, false, rng),
                dw_norm: BatchNorm::new(&mut store, "b.dw_bn", e),
                project: Conv::new(&mut store, "b.project", e, cout, 1, 1, 0, false, rng),
                project_norm: BatchNorm::new(&mut store, "b.project_bn", cout),
                use_residual: stride == 1 && cin == cout,
            };
            let x = rand(&[n, cin, hw, hw], -1.0, 1.0, rng)?;
            if op == "dwbconv" {
                vec![Case {
                    label: label.clone(),
                    x,
                    f: Box::new(move |t, v| {
                        let y = on_tape(t, &store, true, |f| {
                            dwbconv_forward(f, v, &block, Activation::Silu)
                        })?;
                        project(t, y)
                    }),
                }]
            } else {
                let w = store.get(block.dw.kernel).clone();
                vec![Case {
                    label: label.clone(),
                    x: w,
                    f: Box::new(move |t, wv| {
                        let xv = t.constant(x.clone());
                        let y = on_tape(t, &store, true, |f| {
                            f.bind(block.dw.kernel, wv);
                            dwbconv_forward(f, xv, &block, Activation::Silu)
                        })?;
                        project(t, y)
                    }),
                }]
            }
        }
        "attention_block" => {
            let (n, d, h, w, heads) = [(1, 8, 2, 2, 1), (2, 4, 1, 3, 2), (1, 6, 2, 1, 3)][s];
            let mut store = ParamStore::new();
            let sam = SamParams::new(&mut store, "sam", d, heads, true, false, rng)?;
            let g = GffmParams::new(&mut store, "gffm", d, true, rng);
            let x = rand(&[n, d, h, w], -1.0, 1.0, rng)?;
            vec![Case {
                label: label.clone(),
                x,
                f: Box::new(move |t, v| {
                    let y = on_tape(t, &store, false, |f| attention_block(f, v, &sam, &g))?;
                    project(t, y)
                }),
            }]
        }
        "batch_loss" => {
            let n = s + 1;
            let logits = rand(&[n, NUM_OUTPUTS], -2.0, 2.0, rng)?;
            let labels = random_labels(n, rng)?;
            let lw = random_weights(rng);
            vec![Case {
                label: label.clone(),
                x: logits,
                f: Box::new(move |t, z| {
                    let reg = t.slice_last(z, 0, 1)?;
                    let regression = t.sigmoid(reg)?;
                    let groups = t.slice_last(z, 1, NUM_GROUPS * NUM_CLASSES)?;
                    let groups = t.reshape(groups, &[n, NUM_GROUPS, NUM_CLASSES])?;
                    let probs = t.softmax(groups)?;
                    let vars = crate::model::ForwardVars {
                        features: z,
                        attended: z,
                        logits: z,
                        regression,
                        probs,
                    };
                    batch_loss(t, &vars, &labels, &lw)
                }),
            }]
        }
        _ => bail!(Config, "unknown op {}", op),
    })
}

fn random_labels(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AacLabel>> {
    (0..n)
        .map(|_| AacLabel::from_granular(core::array::from_fn(|_| rng.random_range(0..4))))
        .collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        w_reg: core::array::from_fn(|_| rng.random_range(0.5..2.0)),
        class: core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(0.5..2.0))),
    }
}

/// Checks one op over `seeds` and its three shapes.
pub fn check_op(op: &str, seeds: &[u64], sabotaged: bool) -> Result<CheckResult> {
    let mut reports = Vec::new();
    for &seed in seeds {
        for s in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(s as u64));
            for case in op_cases(op, s, &mut rng)? {
                let opts = GradcheckOptions {
                    tol: OP_TOL,
                    seed,
                    ..GradcheckOptions::default()
                };
                let f = case.f;
                let r = if sabotaged {
                    gradcheck_with(
                        |t, x| {
                            let y = sabotage(t, x)?;
                            f(t, y)
                        },
                        &case.x,
                        &opts,
                    )?
                } else {
                    gradcheck_with(&f, &case.x, &opts)?
                };
                reports.push((format!("{} seed{}", case.label, seed), r));
            }
        }
    }
    Ok(CheckResult::collect(op, OP_TOL, reports))
}

/// Parameters whose gradients the end-to-end check samples.
const MODEL_PARAMS: [&str; 8] = [
    "stem.weight",
    "stage1.block1.dw.weight",
    "stage2.block2.project_bn.gamma",
    "head.weight",
    "sam.q.weight",
    "sam.log_alpha",
    "gffm.w1.weight",
    "fc.weight",
];

/// Loss gradient of the whole network, in training mode on a batch of 2,
/// with respect to the input and a spread of parameters.
pub fn check_end_to_end(scale: Scale, seeds: &[u64], sabotaged: bool) -> Result<CheckResult> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut cfg = scale.model_config();
        cfg.seed = seed;
        let mut net = AacLiteNet::build(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        // the head starts at zero, which would hide every upstream gradient
        let fc = net.fc().weight;
        let d = cfg.head_channels;
        let w = he_uniform(&[d, NUM_OUTPUTS], d, &mut rng);
        net.store_mut().set(fc, w.into_data())?;
        let x = rand(
            &[2, cfg.in_channels, cfg.input_h, cfg.input_w],
            0.0,
            1.0,
            &mut rng,
        )?;
        let labels = random_labels(2, &mut rng)?;
        let lw = random_weights(&mut rng);
        let loss =
            |t: &mut Tape, xv: Var, bound: Option<(crate::nn::ParamId, Var)>| -> Result<Var> {
                on_tape(t, net.store(), true, |f| {
                    if let Some((id, v)) = bound {
                        f.bind(id, v);
                    }
                    let mut vars = net.forward_vars(f, xv)?;
                    if sabotaged {
                        vars.regression = sabotage(&mut f.tape, vars.regression)?;
                    }
                    batch_loss(&mut f.tape, &vars, &labels, &lw)
                })
            };
        let opts = GradcheckOptions {
            tol: MODEL_TOL,
            max_coords: Some(scale.coords()),
            seed,
            ..GradcheckOptions::default()
        };
        let r = gradcheck_with(|t, xv| loss(t, xv, None), &x, &opts)?;
        reports.push((format!("input seed{seed}"), r));
        for name in MODEL_PARAMS {
            let Some(id) = net.store().find(name) else {
                bail!(Config, "end-to-end check expects parameter {}", name);
            };
            let p = net.store().get(id).clone();
            let r = gradcheck_with(
                |t, pv| {
                    let xv = t.constant(x.clone());
                    loss(t, xv, Some((id, pv)))
                },
                &p,
                &opts,
            )?;
            reports.push((format!("{name} seed{seed}"), r));
        }
    }
    Ok(CheckResult::collect(END_TO_END, MODEL_TOL, reports))
}

/// All op checks followed by the end-to-end check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    run_suite_with(opts, |_| {})
}

/// [`run_suite`], reporting each result as it completes.
pub fn run_suite_with(
    opts: &SuiteOptions,
    mut progress: impl FnMut(&CheckResult),
) -> Result<SuiteReport> {
    if let Some(s) = &opts.sabotage {
        if s != END_TO_END && !OP_NAMES.contains(&s.as_str()) {
            bail!(Config, "cannot sabotage unknown op {}", s);
        }
    }
    if opts.seeds.is_empty() {
        bail!(Config, "gradient suite needs at least one seed");
    }
    let sab = |name: &str| opts.sabotage.as_deref() == Some(name);
    let mut results = Vec::with_capacity(OP_NAMES.len() + 1);
    for op in OP_NAMES {
        let r = check_op(op, &opts.seeds, sab(op))?;
        progress(&r);
        results.push(r);
    }
    let r = check_end_to_end(opts.scale, &opts.seeds, sab(END_TO_END))?;
    progress(&r);
    results.push(r);
    Ok(SuiteReport { results })
}
