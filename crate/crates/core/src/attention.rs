//! Global attention over the flattened feature map.
//!
//! SAM: `Y = LN(X)`, `Q, K, V = Y W_Q, Y W_K, Y W_V`,
//! `out = softmax(Q K^T / alpha) V + X` with a learnable `alpha = exp(log_alpha)`.
//!
//! GFFM: `Z = LN(X)`, `out = (gelu(Z W_1) * (Z W_2)) W_o + X`.
//!
//! Tokens are laid out row-major over the spatial grid: token `r*W + c`
//! holds the channel vector at `(r, c)`.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math;
use crate::nn::{Forward, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// `[C,H,W] -> [H*W, C]` or `[N,C,H,W] -> [N, H*W, C]`.
pub fn flatten_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let grouped = match s[..] {
        [c, h, w] => tape.reshape(x, &[c, h * w])?,
        [n, c, h, w] => tape.reshape(x, &[n, c, h * w])?,
        _ => bail!(
            Shape,
            "flatten_tokens expects [C,H,W] or [N,C,H,W], got {:?}",
            s
        ),
    };
    tape.transpose(grouped)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = match s[..] {
        [t, _] | [_, t, _] => t,
        _ => bail!(
            Shape,
            "unflatten_tokens expects [T,C] or [N,T,C], got {:?}",
            s
        ),
    };
    if t != h * w {
        bail!(Shape, "{} tokens cannot form a {}x{} grid", t, h, w);
    }
    let chans = tape.transpose(x)?;
    match s[..] {
        [_, c] => tape.reshape(chans, &[c, h, w]),
        [n, _, c] => tape.reshape(chans, &[n, c, h, w]),
        _ => unreachable!(),
    }
}

fn token_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, d] => Ok((1, t, d)),
        [n, t, d] => Ok((n, t, d)),
        _ => bail!(Shape, "expected tokens [T,D] or [N,T,D], got {:?}", shape),
    }
}

/// Per batch item, the token order that sorts rows lexicographically.
fn canonical_order(x: &Tensor, n: usize, t: usize, d: usize) -> Vec<Vec<usize>> {
    let data = x.data();
    (0..n)
        .map(|b| {
            let rows = &data[b * t * d..(b + 1) * t * d];
            let mut order: Vec<usize> = (0..t).collect();
            order.sort_by(|&i, &j| {
                let (ri, rj) = (&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]);
                ri.iter()
                    .zip(rj)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            });
            order
        })
        .collect()
}

/// Flat gather indices placing source row `order[b][r]` at row `r`.
fn row_gather(order: &[Vec<usize>], t: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(order.len() * t * d);
    for (b, o) in order.iter().enumerate() {
        for &src in o {
            let base = (b * t + src) * d;
            idx.extend(base..base + d);
        }
    }
    idx
}

fn invert(order: &[Vec<usize>]) -> Vec<Vec<usize>> {
    order
        .iter()
        .map(|o| {
            let mut inv = alloc::vec![0; o.len()];
            for (r, &src) in o.iter().enumerate() {
                inv[src] = r;
            }
            inv
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamParams {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Projection after `A V`; absent by default.
    pub out: Option<Linear>,
    /// Shape `[1]`; `alpha = exp(log_alpha)`.
    pub log_alpha: ParamId,
    pub heads: usize,
    pub d: usize,
}

/// Intermediate attention matrices of one SAM call, one per head.
pub struct SamTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl SamParams {
    /// `alpha` starts at `sqrt(d / heads)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        bias: bool,
        out_proj: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            bail!(
                Config,
                "{} features cannot be split into {} heads",
                d,
                heads
            );
        }
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let q = Linear::new(store, &format!("{name}.q"), d, d, bias, rng);
        let k = Linear::new(store, &format!("{name}.k"), d, d, bias, rng);
        let v = Linear::new(store, &format!("{name}.v"), d, d, bias, rng);
        let out = out_proj.then(|| Linear::new(store, &format!("{name}.out"), d, d, bias, rng));
        let log_alpha = store.add(
            &format!("{name}.log_alpha"),
            Tensor::scalar(math::ln(math::sqrt((d / heads) as f64))),
            true,
        );
        Ok(Self {
            ln,
            q,
            k,
            v,
            out,
            log_alpha,
            heads,
            d,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(f, x)?.output)
    }

    /// Forward pass that also returns the attention matrices.
    ///
    /// Tokens are processed in a content-sorted order and scattered back, so
    /// the result does not depend on the input token order even at the level
    /// of floating-point rounding.
    pub fn forward_traced(&self, f: &mut Forward<'_>, x: Var) -> Result<SamTrace> {
        f.tape.check(x)?;
        let shape = f.tape.shape(x).to_vec();
        let (n, t, d) = token_dims(&shape)?;
        if d != self.d {
            bail!(
                Shape,
                "SAM configured for {} features, got {:?}",
                self.d,
                shape
            );
        }
        let order = canonical_order(f.tape.value(x), n, t, d);
        let flat = f.tape.gather(x, &row_gather(&order, t, d))?;
        let xc = f.tape.reshape(flat, &shape)?;

        let y = self.ln.forward(f, xc)?;
        let q = self.q.forward(f, y)?;
        let k = self.k.forward(f, y)?;
        let v = self.v.forward(f, y)?;
        let la = f.var(self.log_alpha);
        let neg = f.tape.scale(la, -1.0)?;
        let inv_alpha = f.tape.exp(neg)?;

        let hd = d / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    f.tape.slice_last(q, h * hd, hd)?,
                    f.tape.slice_last(k, h * hd, hd)?,
                    f.tape.slice_last(v, h * hd, hd)?,
                )
            };
            let scores = f.tape.matmul_nt(qh, kh)?;
            let scaled = f.tape.mul(scores, inv_alpha)?;
            let a = f.tape.softmax(scaled)?;
            attention.push(a);
            heads.push(f.tape.matmul(a, vh)?);
        }
        let mut mixed = if heads.len() == 1 {
            heads[0]
        } else {
            f.tape.concat_last(&heads)?
        };
        if let Some(out) = &self.out {
            mixed = out.forward(f, mixed)?;
        }
        let yc = f.tape.add(mixed, xc)?;

        let back = f.tape.gather(yc, &row_gather(&invert(&order), t, d))?;
        let output = f.tape.reshape(back, &shape)?;
        Ok(SamTrace { output, attention })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GffmParams {
    pub ln: LayerNorm,
    /// Gate branch, passed through GELU.
    pub w1: Linear,
    /// Value branch.
    pub w2: Linear,
    pub wo: Linear,
    pub d: usize,
}

impl GffmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            w1: Linear::new(store, &format!("{name}.w1"), d, d, bias, rng),
            w2: Linear::new(store, &format!("{name}.w2"), d, d, bias, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, bias, rng),
            d,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        f.tape.check(x)?;
        let shape = f.tape.shape(x).to_vec();
        let (_, _, d) = token_dims(&shape)?;
        if d != self.d {
            bail!(
                Shape,
                "GFFM configured for {} features, got {:?}",
                self.d,
                shape
            );
        }
        let z = self.ln.forward(f, x)?;
        let a = self.w1.forward(f, z)?;
        let gate = f.tape.gelu(a)?;
        let value = self.w2.forward(f, z)?;
        let h = f.tape.mul(gate, value)?;
        let o = self.wo.forward(f, h)?;
        f.tape.add(o, x)
    }
}

/// flatten -> SAM -> GFFM -> unflatten; the shape is preserved.
pub fn attention_block(
    f: &mut Forward<'_>,
    x: Var,
    sam: &SamParams,
    gffm: &GffmParams,
) -> Result<Var> {
    f.tape.check(x)?;
    let s = f.tape.shape(x).to_vec();
    let (h, w) = match s[..] {
        [_, h, w] | [_, _, h, w] => (h, w),
        _ => bail!(
            Shape,
            "attention_block expects [C,H,W] or [N,C,H,W], got {:?}",
            s
        ),
    };
    let tokens = flatten_tokens(&mut f.tape, x)?;
    let a = sam.forward(f, tokens)?;
    let g = gffm.forward(f, a)?;
    unflatten_tokens(&mut f.tape, g, h, w)
}
