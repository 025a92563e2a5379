//! Network primitives recorded on a [`Tape`].
//!
//! Image tensors are `[N, C, H, W]`; the convolution, normalization and
//! pooling ops also accept an unbatched `[C, H, W]` and return the same rank.
//! Convolution is cross-correlation with symmetric zero padding.

mod layers;
mod store;

pub use layers::{he_uniform, Activation, BatchNorm, Conv, LayerNorm, Linear};
pub use store::{Forward, ParamEntry, ParamGrads, ParamId, ParamStore};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::ops::UnaryKind;
use crate::tensor::{gemm, Backward, Tape, Tensor, Transpose, Var};

/// `floor((input + 2*padding - kernel) / stride) + 1`, or `None` when < 1.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv2dParams {
    /// `[ch, 1, kh, kw]`
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub momentum: f64,
}

impl NormParams {
    /// gamma = 1, beta = 0, running stats 0/1.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]).expect("positive channels"),
            beta: Tensor::zeros(&[channels]).expect("positive channels"),
            eps,
            running_mean: Some(Tensor::zeros(&[channels]).expect("positive channels")),
            running_var: Some(Tensor::ones(&[channels]).expect("positive channels")),
            momentum: 0.1,
        }
    }
}

/// New running statistics produced by a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn image_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => bail!(
            Shape,
            "{op}: expected [N,C,H,W] or [C,H,W], got {:?}",
            shape
        ),
    }
}

fn out_shape(rank: usize, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if rank == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    g: Geom,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = &self.g;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (patch, plane) = (g.patch(), g.out_plane());
        let in_sz = g.c * g.h * g.w;
        let out_sz = g.oc * plane;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; patch * plane]
        };
        for ni in 0..g.n {
            let xn = &x[ni * in_sz..(ni + 1) * in_sz];
            let gn = &grad[ni * out_sz..(ni + 1) * out_sz];
            if let Some(dw) = dw.as_mut() {
                let c: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, &mut cols);
                    &cols
                };
                gemm(
                    g.oc,
                    plane,
                    patch,
                    1.0,
                    gn,
                    Transpose::No,
                    c,
                    Transpose::Yes,
                    1.0,
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[ni * in_sz..(ni + 1) * in_sz];
                if g.is_pointwise() {
                    gemm(
                        patch,
                        g.oc,
                        plane,
                        1.0,
                        w,
                        Transpose::Yes,
                        gn,
                        Transpose::No,
                        0.0,
                        dxn,
                    );
                } else {
                    gemm(
                        patch,
                        g.oc,
                        plane,
                        1.0,
                        w,
                        Transpose::Yes,
                        gn,
                        Transpose::No,
                        0.0,
                        &mut cols,
                    );
                    col2im(&cols, g, dxn);
                }
            }
        }
        let db = (inputs.len() > 2 && needs[2]).then(|| {
            let mut db = vec![0.0; g.oc];
            for ni in 0..g.n {
                for (o, d) in db.iter_mut().enumerate() {
                    let base = ni * out_sz + o * plane;
                    *d += grad[base..base + plane].iter().sum::<f64>();
                }
            }
            db
        });
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            out.push(db);
        }
        out
    }
}

struct DepthwiseOp {
    g: Geom,
}

impl Backward for DepthwiseOp {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = &self.g;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let plane_in = g.h * g.w;
        let plane_out = g.out_plane();
        let kk = g.kh * g.kw;
        for ni in 0..g.n {
            for ci in 0..g.c {
                let xo = (ni * g.c + ci) * plane_in;
                let go = (ni * g.c + ci) * plane_out;
                let wk = &w[ci * kk..(ci + 1) * kk];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gv = grad[go + oy * g.ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = xo + iy as usize * g.w + ix as usize;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gv * wk[ky * g.kw + kx];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[ci * kk + ky * g.kw + kx] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; g.c];
                for ni in 0..g.n {
                    for (ci, d) in db.iter_mut().enumerate() {
                        let go = (ni * g.c + ci) * plane_out;
                        *d += grad[go..go + plane_out].iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        out
    }
}

struct NormOp {
    /// Normalized values (x - mean) * inv_std.
    xhat: Vec<f64>,
    /// Per-group inverse standard deviation.
    inv_std: Vec<f64>,
    kind: NormKind,
}

#[derive(Clone, Copy)]
enum NormKind {
    /// Groups are rows of the last axis of width `d`.
    Layer { d: usize },
    /// Groups are channels, statistics over N*H*W.
    BatchTrain { n: usize, c: usize, plane: usize },
    /// Fixed statistics; gradient w.r.t. x is a per-channel scale.
    BatchEval { n: usize, c: usize, plane: usize },
}

impl Backward for NormOp {
    fn name(&self) -> &'static str {
        match self.kind {
            NormKind::Layer { .. } => "layernorm",
            NormKind::BatchTrain { .. } | NormKind::BatchEval { .. } => "batchnorm2d",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let xhat = &self.xhat;
        let mut dgamma = vec![0.0; gamma.len()];
        let mut dbeta = vec![0.0; gamma.len()];
        let mut dx = vec![0.0; xhat.len()];
        match self.kind {
            NormKind::Layer { d } => {
                for (r, ((gr, xr), dxr)) in grad
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gamma[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                    }
                    let k = self.inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        dxr[j] = k * (d as f64 * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                    }
                }
            }
            NormKind::BatchTrain { n, c, plane } | NormKind::BatchEval { n, c, plane } => {
                let train = matches!(self.kind, NormKind::BatchTrain { .. });
                let m = (n * plane) as f64;
                for ci in 0..c {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dgamma[ci] += grad[i] * xhat[i];
                            dbeta[ci] += grad[i];
                            let dxh = grad[i] * gamma[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i];
                        }
                    }
                    let inv = self.inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            let dxh = grad[i] * gamma[ci];
                            dx[i] = if train {
                                inv / m * (m * dxh - sum_dxh - xhat[i] * sum_dxh_xh)
                            } else {
                                dxh * inv
                            };
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dgamma),
            needs[2].then_some(dbeta),
        ]
    }
}

struct SoftmaxOp {
    width: usize,
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; grad.len()];
        for ((y, g), d) in out
            .data()
            .chunks_exact(self.width)
            .zip(grad.chunks_exact(self.width))
            .zip(dx.chunks_exact_mut(self.width))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..self.width {
                d[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

struct GapOp {
    plane: usize,
}

impl Backward for GapOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.plane as f64;
        let mut dx = vec![0.0; inputs[0].numel()];
        for (g, chunk) in grad.iter().zip(dx.chunks_exact_mut(self.plane)) {
            chunk.fill(g * inv);
        }
        vec![Some(dx)]
    }
}

impl Tape {
    /// 2-D cross-correlation. `w` is `[out_ch, in_ch, kh, kw]`, `b` is `[out_ch]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = image_dims(&xs, "conv2d")?;
        let ws = self.shape(w).to_vec();
        let [oc, ic, kh, kw] = ws[..] else {
            bail!(Shape, "conv2d kernel must be [out,in,kh,kw], got {:?}", ws);
        };
        if ic != c {
            bail!(
                Shape,
                "conv2d: input has {} channels, kernel expects {}",
                c,
                ic
            );
        }
        if stride == 0 {
            bail!(Size, "conv2d stride must be positive");
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(wd, kw, stride, padding),
        ) else {
            bail!(
                Size,
                "conv2d output extent < 1 for input {}x{}, kernel {}x{}, pad {}",
                h,
                wd,
                kh,
                kw,
                padding
            );
        };
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [oc] {
                bail!(
                    Shape,
                    "conv2d bias must be [{}], got {:?}",
                    oc,
                    self.shape(b)
                );
            }
        }
        let g = Geom {
            n,
            c,
            h,
            w: wd,
            oc,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (patch, plane) = (g.patch(), g.out_plane());
        let mut out = vec![0.0; n * oc * plane];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; patch * plane]
            };
            for ni in 0..n {
                let xn = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
                let cm: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &g, &mut cols);
                    &cols
                };
                gemm(
                    oc,
                    patch,
                    plane,
                    1.0,
                    wdata,
                    Transpose::No,
                    cm,
                    Transpose::No,
                    0.0,
                    &mut out[ni * oc * plane..(ni + 1) * oc * plane],
                );
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                    let bv = bd[i % oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::from_vec(&out_shape(xs.len(), n, oc, oh, ow), out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(value, &inputs, Conv2dOp { g })
    }

    /// Per-channel convolution. `w` is `[ch, 1, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = image_dims(&xs, "depthwise_conv2d")?;
        let ws = self.shape(w).to_vec();
        let [kc, 1, kh, kw] = ws[..] else {
            bail!(Shape, "depthwise kernel must be [ch,1,kh,kw], got {:?}", ws);
        };
        if kc != c {
            bail!(
                Shape,
                "depthwise: input has {} channels, kernel has {}",
                c,
                kc
            );
        }
        if stride == 0 {
            bail!(Size, "depthwise stride must be positive");
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(wd, kw, stride, padding),
        ) else {
            bail!(Size, "depthwise output extent < 1");
        };
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [c] {
                bail!(
                    Shape,
                    "depthwise bias must be [{}], got {:?}",
                    c,
                    self.shape(b)
                );
            }
        }
        let g = Geom {
            n,
            c,
            h,
            w: wd,
            oc: c,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let kk = kh * kw;
        let mut out = vec![0.0; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let xo = (ni * c + ci) * h * wd;
                let oo = (ni * c + ci) * oh * ow;
                let wk = &wdat[ci * kk..(ci + 1) * kk];
                let bias = bd.map_or(0.0, |b| b[ci]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = xo + iy as usize * wd;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += xd[row + ix as usize] * wk[ky * kw + kx];
                                }
                            }
                        }
                        out[oo + oy * ow + ox] = acc + bias;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&out_shape(xs.len(), n, c, oh, ow), out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(value, &inputs, DepthwiseOp { g })
    }

    /// `y = x W + b` along the trailing axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [din, dout] = ws[..] else {
            bail!(Shape, "linear weight must be [in,out], got {:?}", ws);
        };
        if xs.last() != Some(&din) {
            bail!(Shape, "linear: input {:?} does not end in {}", xs, din);
        }
        let rows = xs.iter().product::<usize>() / din;
        let flat = self.reshape(x, &[rows, din])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [dout] {
                bail!(
                    Shape,
                    "linear bias must be [{}], got {:?}",
                    dout,
                    self.shape(b)
                );
            }
            y = self.add(y, b)?;
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        self.reshape(y, &shape)
    }

    /// Normalizes each slice of the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("non-empty");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(
                Shape,
                "layernorm over {} features needs gamma/beta [{}], got {:?}/{:?}",
                d,
                d,
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        self.record(
            value,
            &[x, gamma, beta],
            NormOp {
                xhat,
                inv_std,
                kind: NormKind::Layer { d },
            },
        )
    }

    /// Batch normalization over `[N,C,H,W]` (or `[C,H,W]` as a batch of one).
    ///
    /// Training mode normalizes with batch statistics and returns updated
    /// running statistics; eval mode uses `running_mean`/`running_var`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        momentum: f64,
        training: bool,
    ) -> Result<(Var, Option<RunningStats>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = image_dims(&xs, "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(
                Shape,
                "batchnorm2d over {} channels: gamma/beta shape mismatch",
                c
            );
        }
        if running_mean.len() != c || running_var.len() != c {
            bail!(Shape, "batchnorm2d running stats must have {} entries", c);
        }
        if eps <= 0.0 {
            bail!(Stats, "batchnorm eps must be positive");
        }
        let plane = h * w;
        let m = n * plane;
        if training && m < 2 {
            bail!(Stats, "batch statistics need N*H*W >= 2, got {}", m);
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(c);
        let mut stats = RunningStats {
            mean: Vec::with_capacity(c),
            var: Vec::with_capacity(c),
        };
        for ci in 0..c {
            let (mean, var) = if training {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    s += xd[base..base + plane].iter().sum::<f64>();
                }
                let mean = s / m as f64;
                let mut ss = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    ss += xd[base..base + plane]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = ss / m as f64;
                let unbiased = ss / (m - 1) as f64;
                stats
                    .mean
                    .push((1.0 - momentum) * running_mean[ci] + momentum * mean);
                stats
                    .var
                    .push((1.0 - momentum) * running_var[ci] + momentum * unbiased);
                (mean, var)
            } else {
                if running_var[ci] < 0.0 {
                    bail!(Stats, "negative running variance in channel {}", ci);
                }
                (running_mean[ci], running_var[ci])
            };
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std.push(inv);
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (xd[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = gd[ci] * xh + bd[ci];
                }
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let kind = if training {
            NormKind::BatchTrain { n, c, plane }
        } else {
            NormKind::BatchEval { n, c, plane }
        };
        let v = self.record(
            value,
            &[x, gamma, beta],
            NormOp {
                xhat,
                inv_std,
                kind,
            },
        )?;
        Ok((v, training.then_some(stats)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let width = *t.shape().last().expect("non-empty");
        let mut out = vec![0.0; t.numel()];
        for (row, dst) in t
            .data()
            .chunks_exact(width)
            .zip(out.chunks_exact_mut(width))
        {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = math::exp(v - max);
                sum += *d;
            }
            let inv = 1.0 / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        self.record(value, &[x], SoftmaxOp { width })
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = image_dims(&xs, "global_avg_pool")?;
        let plane = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
        let value = Tensor::from_vec(&shape, data)?;
        self.record(value, &[x], GapOp { plane })
    }
}

/// Convolution with parameters from a [`Conv2dParams`] registered as tape parameters.
pub fn conv2d(tape: &mut Tape, x: Var, p: &Conv2dParams) -> Result<Var> {
    let w = tape.param(&p.kernel);
    let b = p.bias.as_ref().map(|b| tape.param(b));
    tape.conv2d(x, w, b, p.stride, p.padding)
}

pub fn depthwise_conv2d(tape: &mut Tape, x: Var, p: &DepthwiseConv2dParams) -> Result<Var> {
    let w = tape.param(&p.kernel);
    let b = p.bias.as_ref().map(|b| tape.param(b));
    tape.depthwise_conv2d(x, w, b, p.stride, p.padding)
}

pub fn layernorm(tape: &mut Tape, x: Var, p: &NormParams) -> Result<Var> {
    let g = tape.param(&p.gamma);
    let b = tape.param(&p.beta);
    tape.layernorm(x, g, b, p.eps)
}

/// Batch norm that writes updated running statistics back into `p` in training mode.
pub fn batchnorm2d(tape: &mut Tape, x: Var, p: &mut NormParams, training: bool) -> Result<Var> {
    let c = p.gamma.numel();
    let rm = p
        .running_mean
        .get_or_insert_with(|| Tensor::zeros(&[c]).expect("positive channels"))
        .data()
        .to_vec();
    let rv = p
        .running_var
        .get_or_insert_with(|| Tensor::ones(&[c]).expect("positive channels"))
        .data()
        .to_vec();
    let g = tape.param(&p.gamma);
    let b = tape.param(&p.beta);
    let (y, stats) = tape.batchnorm2d(x, g, b, &rm, &rv, p.eps, p.momentum, training)?;
    if let Some(s) = stats {
        p.running_mean = Some(Tensor::from_vec(&[c], s.mean)?);
        p.running_var = Some(Tensor::from_vec(&[c], s.var)?);
    }
    Ok(y)
}
