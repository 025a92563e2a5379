//! Elementwise, reduction and linear-algebra primitives.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Transpose};
use super::{Backward, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::math;

/// Length of the broadcast operand if `small` (after stripping leading unit
/// extents) is a trailing suffix of `big`.
pub fn broadcast_suffix_len(big: &[usize], small: &[usize]) -> Option<usize> {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    if core.len() > big.len() || !big.ends_with(core) {
        return None;
    }
    Some(core.iter().product())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
}

fn reduce_to(len: usize, g: &[f64]) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (la, lb) = (a.len(), b.len());
        let ga = needs[0].then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => reduce_to(la, g),
            BinaryKind::Mul => {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * b[i % lb]).collect();
                reduce_to(la, &full)
            }
        });
        let gb = needs[1].then(|| match self.kind {
            BinaryKind::Add => reduce_to(lb, g),
            BinaryKind::Sub => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                reduce_to(lb, &neg)
            }
            BinaryKind::Mul => {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * a[i % la]).collect();
                reduce_to(lb, &full)
            }
        });
        vec![ga, gb]
    }
}

struct Scale {
    factor: f64,
}

impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.factor).collect())]
    }
}

struct Identity {
    name: &'static str,
}

impl Backward for Identity {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct Transpose2 {
    rows: usize,
    cols: usize,
}

fn transpose_last2(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; src.len()];
    for (bi, chunk) in src.chunks_exact(block).enumerate() {
        let dst = &mut out[bi * block..(bi + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = chunk[r * cols + c];
            }
        }
    }
    out
}

impl Backward for Transpose2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(transpose_last2(self.cols, self.rows, g))]
    }
}

struct Sum {
    scale: f64,
}

impl Backward for Sum {
    fn name(&self) -> &'static str {
        if self.scale == 1.0 {
            "sum"
        } else {
            "mean"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].numel()])]
    }
}

/// Argmax positions along the last axis, one per leading slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxIndex(pub Vec<usize>);

struct MaxLast {
    width: usize,
    argmax: Vec<usize>,
}

impl Backward for MaxLast {
    fn name(&self) -> &'static str {
        "max"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (row, (&j, gi)) in self.argmax.iter().zip(g).enumerate() {
            out[row * self.width + j] += gi;
        }
        vec![Some(out)]
    }
}

struct MatMul {
    ta: Transpose,
    tb: Transpose,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for bi in 0..self.batch {
            let a_s = &a[bi * m * k..(bi + 1) * m * k];
            let b_off = if self.b_batched { bi * k * n } else { 0 };
            let b_s = &b[b_off..b_off + k * n];
            let g_s = &g[bi * m * n..(bi + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                match self.ta {
                    // dA = dC * op(B)^T
                    Transpose::No => {
                        let tb = match self.tb {
                            Transpose::No => Transpose::Yes,
                            Transpose::Yes => Transpose::No,
                        };
                        gemm(m, n, k, 1.0, g_s, Transpose::No, b_s, tb, 0.0, dst);
                    }
                    // stored A^T: d(A^T) = op(B) * dC^T
                    Transpose::Yes => {
                        gemm(k, n, m, 1.0, b_s, self.tb, g_s, Transpose::Yes, 0.0, dst);
                    }
                }
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[b_off..b_off + k * n];
                let beta = if self.b_batched || bi == 0 { 0.0 } else { 1.0 };
                match self.tb {
                    // dB = op(A)^T * dC
                    Transpose::No => {
                        let ta = match self.ta {
                            Transpose::No => Transpose::Yes,
                            Transpose::Yes => Transpose::No,
                        };
                        gemm(k, m, n, 1.0, a_s, ta, g_s, Transpose::No, beta, dst);
                    }
                    // stored B^T: d(B^T) = dC^T * op(A)
                    Transpose::Yes => {
                        gemm(n, m, k, 1.0, g_s, Transpose::Yes, a_s, self.ta, beta, dst);
                    }
                }
            }
        }
        vec![ga, gb]
    }
}

struct SliceLast {
    width: usize,
    start: usize,
    len: usize,
}

impl Backward for SliceLast {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (row, chunk) in g.chunks_exact(self.len).enumerate() {
            let base = row * self.width + self.start;
            out[base..base + self.len].copy_from_slice(chunk);
        }
        vec![Some(out)]
    }
}

struct ConcatLast {
    widths: Vec<usize>,
}

impl Backward for ConcatLast {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let rows = g.len() / total;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            if need {
                let mut part = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                out.push(Some(part));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

struct Gather {
    indices: Vec<usize>,
}

impl Backward for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (&i, gi) in self.indices.iter().zip(g) {
            out[i] += gi;
        }
        vec![Some(out)]
    }
}

#[derive(Clone, Copy)]
pub(crate) enum UnaryKind {
    Exp,
    Ln,
    Square,
    Sigmoid,
    Silu,
    Gelu,
}

pub(crate) struct Unary {
    pub(crate) kind: UnaryKind,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Exp => math::exp(x),
            UnaryKind::Ln => math::ln(x),
            UnaryKind::Square => x * x,
            UnaryKind::Sigmoid => math::sigmoid(x),
            UnaryKind::Silu => math::silu(x),
            UnaryKind::Gelu => math::gelu(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Silu => math::silu_grad(x),
            UnaryKind::Gelu => math::gelu_grad(x),
        }
    }
}

impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Square => "square",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Gelu => "gelu",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = out.data();
        vec![Some(
            g.iter()
                .zip(x.iter().zip(y))
                .map(|(gi, (&xi, &yi))| gi * self.kind.derivative(xi, yi))
                .collect(),
        )]
    }
}

fn shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-empty shape") = last;
    s
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (la, lb) = (ta.numel(), tb.numel());
        let out_shape =
            if ta.shape() == tb.shape() || broadcast_suffix_len(ta.shape(), tb.shape()).is_some() {
                ta.shape().to_vec()
            } else if broadcast_suffix_len(tb.shape(), ta.shape()).is_some() {
                tb.shape().to_vec()
            } else {
                bail!(
                    Shape,
                    "{:?}: incompatible shapes {:?} and {:?}",
                    kind,
                    ta.shape(),
                    tb.shape()
                );
            };
        let n = la.max(lb);
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (da[i % la], db[i % lb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::from_vec(&out_shape, data)?;
        self.record(value, &[a, b], Binary { kind })
    }

    /// Elementwise sum; `b` may broadcast over leading extents of `a` or vice versa.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Hadamard product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v * factor);
        self.record(value, &[a], Scale { factor })
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v + offset);
        self.record(value, &[a], Identity { name: "add_scalar" })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshaped(shape)?;
        self.record(value, &[a], Identity { name: "reshape" })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let r = t.rank();
        if r < 2 {
            bail!(Shape, "transpose needs rank >= 2, got {:?}", t.shape());
        }
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::from_vec(&shape, transpose_last2(rows, cols, t.data()))?;
        self.record(value, &[a], Transpose2 { rows, cols })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), &[a], Sum { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let scale = 1.0 / t.numel() as f64;
        let s: f64 = t.data().iter().sum::<f64>() * scale;
        self.record(Tensor::scalar(s), &[a], Sum { scale })
    }

    /// Maximum along the last axis with the winning positions (first on ties).
    pub fn max_last(&mut self, a: Var) -> Result<(Var, MaxIndex)> {
        self.check(a)?;
        let t = self.value(a);
        let width = *t.shape().last().expect("non-empty shape");
        let mut vals = Vec::with_capacity(t.numel() / width);
        let mut argmax = Vec::with_capacity(t.numel() / width);
        for row in t.data().chunks_exact(width) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        let shape = if t.rank() == 1 {
            vec![1]
        } else {
            t.shape()[..t.rank() - 1].to_vec()
        };
        let value = Tensor::from_vec(&shape, vals)?;
        let idx = MaxIndex(argmax.clone());
        let v = self.record(value, &[a], MaxLast { width, argmax })?;
        Ok((v, idx))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: Transpose, tb: Transpose) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (batch, a2) = match sa.len() {
            2 => (1, [sa[0], sa[1]]),
            3 => (sa[0], [sa[1], sa[2]]),
            _ => bail!(Shape, "matmul lhs must be rank 2 or 3, got {:?}", sa),
        };
        let (b_batched, b2) = match sb.len() {
            2 => (false, [sb[0], sb[1]]),
            3 if sb[0] == batch && sa.len() == 3 => (true, [sb[1], sb[2]]),
            _ => bail!(Shape, "matmul rhs {:?} incompatible with lhs {:?}", sb, sa),
        };
        let (m, k) = match ta {
            Transpose::No => (a2[0], a2[1]),
            Transpose::Yes => (a2[1], a2[0]),
        };
        let (kb, n) = match tb {
            Transpose::No => (b2[0], b2[1]),
            Transpose::Yes => (b2[1], b2[0]),
        };
        if k != kb {
            bail!(Shape, "matmul inner extents differ: {:?} x {:?}", sa, sb);
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (va.data(), vb.data());
        for bi in 0..batch {
            let b_off = if b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                1.0,
                &da[bi * m * k..(bi + 1) * m * k],
                ta,
                &db[b_off..b_off + k * n],
                tb,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = Tensor::from_vec(&shape, out)?;
        self.record(
            value,
            &[a, b],
            MatMul {
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_batched,
            },
        )
    }

    /// `[m,k] x [k,n]`, `[B,m,k] x [k,n]` or `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Transpose::No, Transpose::No)
    }

    /// `a * b^T` over the last two axes, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Transpose::No, Transpose::Yes)
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let width = *t.shape().last().expect("non-empty shape");
        if len == 0 || start + len > width {
            bail!(
                Shape,
                "slice {}..{} out of last extent {}",
                start,
                start + len,
                width
            );
        }
        let mut data = Vec::with_capacity(t.numel() / width * len);
        for row in t.data().chunks_exact(width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_vec(&shape_with_last(t.shape(), len), data)?;
        self.record(value, &[a], SliceLast { width, start, len })
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Shape, "concat of zero tensors");
        }
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.value(parts[0]).shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                bail!(
                    Shape,
                    "concat leading extents differ: {:?} vs {:?}",
                    s,
                    lead
                );
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, data)?;
        self.record(value, parts, ConcatLast { widths })
    }

    /// Picks flat positions into a 1-D result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            bail!(Shape, "gather index {} out of range {}", bad, t.numel());
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::from_vec(&[indices.len()], data)?;
        self.record(
            value,
            &[a],
            Gather {
                indices: indices.to_vec(),
            },
        )
    }

    pub(crate) fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| kind.apply(v));
        self.record(value, &[a], Unary { kind })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }
}
