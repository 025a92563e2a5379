//! Layers whose parameters live in a [`ParamStore`].

use alloc::format;

use rand::Rng;

use super::store::{Forward, ParamId, ParamStore};
use crate::error::Result;
use crate::math;
use crate::tensor::{Tensor, Var};

/// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let b = math::sqrt(6.0 / fan_in as f64);
    Tensor::rand_uniform(shape, -b, b, rng).expect("positive extents")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Silu => f.tape.silu(x),
            Self::Gelu => f.tape.gelu(x),
            Self::Identity => Ok(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Silu => "silu",
            Self::Gelu => "gelu",
            Self::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Self::Silu),
            "gelu" => Some(Self::Gelu),
            "identity" => Some(Self::Identity),
            _ => None,
        }
    }
}

/// Dense or depthwise 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let kernel = store.add(
            &format!("{name}.weight"),
            he_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                Tensor::zeros(&[out_ch]).unwrap(),
                true,
            )
        });
        Self {
            kernel,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            padding,
            depthwise: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depthwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let kernel = store.add(
            &format!("{name}.weight"),
            he_uniform(&[ch, 1, k, k], k * k, rng),
            true,
        );
        let bias =
            bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[ch]).unwrap(), true));
        Self {
            kernel,
            bias,
            in_ch: ch,
            out_ch: ch,
            k,
            stride,
            padding,
            depthwise: true,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.var(self.kernel);
        let b = self.bias.map(|b| f.var(b));
        if self.depthwise {
            f.tape.depthwise_conv2d(x, w, b, self.stride, self.padding)
        } else {
            f.tape.conv2d(x, w, b, self.stride, self.padding)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[ch]).unwrap(), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[ch]).unwrap(), true),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                Tensor::zeros(&[ch]).unwrap(),
                false,
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                Tensor::ones(&[ch]).unwrap(),
                false,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.var(self.gamma);
        let b = f.var(self.beta);
        let store = f.store();
        let training = f.training();
        let (y, stats) = f.tape.batchnorm2d(
            x,
            g,
            b,
            store.get(self.running_mean).data(),
            store.get(self.running_var).data(),
            self.eps,
            self.momentum,
            training,
        )?;
        if let Some(s) = stats {
            f.queue_update(self.running_mean, s.mean);
            f.queue_update(self.running_var, s.var);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[d]).unwrap(), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d]).unwrap(), true),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.var(self.gamma);
        let b = f.var(self.beta);
        f.tape.layernorm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                he_uniform(&[d_in, d_out], d_in, rng),
                true,
            ),
            bias: bias.then(|| {
                store.add(
                    &format!("{name}.bias"),
                    Tensor::zeros(&[d_out]).unwrap(),
                    true,
                )
            }),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.var(self.weight);
        let b = self.bias.map(|b| f.var(b));
        f.tape.linear(x, w, b)
    }
}
