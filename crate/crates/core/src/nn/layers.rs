//! Parameterized layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so models can be cast, hashed, frozen and serialized as a
//! flat table.

use rand::Rng;

use super::graph::{Graph, Spread, Var};
use super::params::{uniform_tensor, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, Result};

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a common name prefix with seeded init.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}/{}", self.prefix, local)
        }
    }

    /// Nested builder sharing the store and rng.
    pub fn sub(&mut self, local: &str) -> Builder<'_, R> {
        let prefix = self.name(local);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn uniform(&mut self, local: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = uniform_tensor(self.rng, shape, (1.0 / fan_in as f64).sqrt());
        self.store.add(self.name(local), t)
    }

    pub fn constant(&mut self, local: &str, shape: &[usize], v: f32) -> Result<ParamId> {
        self.store.add(self.name(local), Tensor::full(shape, v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(bld, name, in_dim, out_dim, Init::Uniform)
    }

    pub fn with_init<R: Rng>(bld: &mut Builder<'_, R>, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let mut b = bld.sub(name);
        let w = match init {
            Init::Uniform => b.uniform("weight", &[out_dim, in_dim], in_dim)?,
            Init::Zero => b.constant("weight", &[out_dim, in_dim], 0.0)?,
        };
        let bias = b.constant("bias", &[out_dim], 0.0)?;
        Ok(Self {
            w,
            b: bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.dense(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, dim: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            scale: b.constant("scale", &[dim], 1.0)?,
            shift: b.constant("shift", &[dim], 0.0)?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.dim) {
            return dim_err(format!("layernorm({}) on {:?}", self.dim, g.shape(x)));
        }
        let n = g.standardize(x, LN_EPS, Spread::RootVarEps)?;
        let s = g.param(self.scale);
        let t = g.param(self.shift);
        let y = g.mul_row(n, s)?;
        g.add_row(y, t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        let mut b = bld.sub(name);
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::Uniform => b.uniform("weight", &shape, cin * k * k)?,
            Init::Zero => b.constant("weight", &shape, 0.0)?,
        };
        Ok(Self {
            w,
            b: b.constant("bias", &[cout], 0.0)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution; kernel stored as `[in_ch, out_ch, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2d {
    /// Fan-in is the number of inputs reaching each output, `cin·k²/stride²`.
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            w: b.uniform("weight", &[cin, cout, k, k], (cin * k * k / (stride * stride)).max(1))?,
            b: b.constant("bias", &[cout], 0.0)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    /// `dim` is the attention width; queries have width `dim`, context has width `ctx_dim`.
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return dim_err(format!("attention width {dim} not divisible by {heads} heads"));
        }
        let mut b = bld.sub(name);
        Ok(Self {
            q: Dense::new(&mut b, "q", dim, dim)?,
            k: Dense::new(&mut b, "k", ctx_dim, dim)?,
            v: Dense::new(&mut b, "v", ctx_dim, dim)?,
            o: Dense::new(&mut b, "o", dim, dim)?,
            heads,
            dim,
        })
    }

    /// `queries [B,Q,dim]`, `context [B,K,ctx_dim]` → `[B,Q,dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var) -> Result<Var> {
        let qs = g.shape(queries).to_vec();
        let cs = g.shape(context).to_vec();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != self.dim {
            return dim_err(format!("cross_attention: queries {qs:?}, context {cs:?}"));
        }
        let (b, nq, nk, h) = (qs[0], qs[1], cs[1], self.heads);
        let dh = self.dim / h;
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let split = |g: &mut Graph<'_, T>, x: Var, n: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, n, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, n, dh])
        };
        let q = split(g, q, nq)?;
        let k = split(g, k, nk)?;
        let v = split(g, v, nk)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let out = g.bmm(attn, v, false)?;
        let out = g.reshape(out, &[b, h, nq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, nq, self.dim])?;
        self.o.forward(g, out)
    }
}
