use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Builder, Conv2d, ConvT2d, CrossAttention, Dense, Graph, Init, Real, Tensor, Var};
use crate::refinement::Vcm;
use crate::representations::{D_S, IMG};

/// Decoder injection sites, ordered from the bottleneck outwards.
pub const SITES: usize = 3;
pub const WIDTHS: [usize; 3] = [16, 32, 64];
pub const TEMB_DIM: usize = 32;
const TEMB_HIDDEN: usize = 64;
const ATTN_HEADS: usize = 1;

/// `(C_i, H_i, W_i)` of decoder injection site `i`.
pub fn site_shape(i: usize) -> (usize, usize, usize) {
    let c = WIDTHS[SITES - 1 - i];
    let hw = IMG >> (SITES - 1 - i);
    (c, hw, hw)
}

/// Sinusoidal embedding `[sin(t·f_k), cos(t·f_k)]`, `f_k = 10000^(−k/16)`.
pub fn timestep_embedding<T: Real>(ts: &[usize]) -> Result<Tensor<T>> {
    let half = TEMB_DIM / 2;
    let mut data = Vec::with_capacity(ts.len() * TEMB_DIM);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp() * t as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(s.into_iter().chain(c).map(T::lit));
    }
    Tensor::new(vec![ts.len(), TEMB_DIM], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Direct,
    Vcm,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(FusionMode::Direct),
            "vcm" => Ok(FusionMode::Vcm),
            _ => Err(Error::Config(format!("unknown fusion mode {s}"))),
        }
    }
}

/// How condition features join the decoder features at each site.
#[derive(Clone, Copy)]
pub enum Fusion<'a> {
    Direct,
    Vcm(&'a Vcm),
    /// Gated fusion with every weight fixed to one value.
    Constant(f64),
}

/// Per-site condition features, indexed like the sites.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub edge: [Var; SITES],
    pub color: [Var; SITES],
}

/// Host-side condition features, reusable across sampler steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CondFeatures<T: Real = f32> {
    pub edge: [Tensor<T>; SITES],
    pub color: [Tensor<T>; SITES],
}

impl<T: Real> CondFeatures<T> {
    pub fn zeros(batch: usize) -> Self {
        let z = |i: usize| {
            let (c, h, w) = site_shape(i);
            Tensor::zeros(&[batch, c, h, w])
        };
        Self {
            edge: std::array::from_fn(z),
            color: std::array::from_fn(z),
        }
    }

    pub fn batch(&self) -> usize {
        self.edge[0].shape()[0]
    }

    pub fn input(&self, g: &mut Graph<'_, T>) -> Result<CondVars> {
        let mut edge = Vec::with_capacity(SITES);
        let mut color = Vec::with_capacity(SITES);
        for i in 0..SITES {
            edge.push(g.input(self.edge[i].clone())?);
            color.push(g.input(self.color[i].clone())?);
        }
        Ok(CondVars {
            edge: edge.try_into().expect("SITES entries"),
            color: color.try_into().expect("SITES entries"),
        })
    }

    pub fn read(g: &Graph<'_, T>, v: &CondVars) -> Self {
        Self {
            edge: std::array::from_fn(|i| g.value(v.edge[i]).clone()),
            color: std::array::from_fn(|i| g.value(v.color[i]).clone()),
        }
    }

    /// Items `idx` of the batch.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let rows: Vec<&[T]> = idx.iter().map(|&i| t.row(i)).collect();
            let mut shape = t.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, rows.concat())
        };
        let mut edge = Vec::with_capacity(SITES);
        let mut color = Vec::with_capacity(SITES);
        for i in 0..SITES {
            edge.push(pick(&self.edge[i])?);
            color.push(pick(&self.color[i])?);
        }
        Ok(Self {
            edge: edge.try_into().expect("SITES entries"),
            color: color.try_into().expect("SITES entries"),
        })
    }
}

/// Conv stack mapping one condition image to a feature map per site.
#[derive(Clone, Debug)]
pub struct CondEncoder {
    c0: Conv2d,
    c1: Conv2d,
    c2: Conv2d,
    /// Zero-initialized 1×1 outputs, indexed by site.
    out: [Conv2d; SITES],
}

impl CondEncoder {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, cin: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        let [w0, w1, w2] = WIDTHS;
        let c0 = Conv2d::new(&mut b, "c0", cin, w0, 3, 1, 1, Init::Uniform)?;
        let c1 = Conv2d::new(&mut b, "c1", w0, w1, 3, 2, 1, Init::Uniform)?;
        let c2 = Conv2d::new(&mut b, "c2", w1, w2, 3, 2, 1, Init::Uniform)?;
        let mut out = Vec::with_capacity(SITES);
        for i in 0..SITES {
            let c = site_shape(i).0;
            out.push(Conv2d::new(&mut b, &format!("out{i}"), c, c, 1, 1, 0, Init::Zero)?);
        }
        Ok(Self {
            c0,
            c1,
            c2,
            out: out.try_into().expect("SITES entries"),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<[Var; SITES]> {
        let h0 = self.c0.forward(g, x)?;
        let h0 = g.silu(h0)?;
        let h1 = self.c1.forward(g, h0)?;
        let h1 = g.silu(h1)?;
        let h2 = self.c2.forward(g, h1)?;
        let h2 = g.silu(h2)?;
        Ok([
            self.out[0].forward(g, h2)?,
            self.out[1].forward(g, h1)?,
            self.out[2].forward(g, h0)?,
        ])
    }
}

/// Edge and color condition encoders.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub edge: CondEncoder,
    pub color: CondEncoder,
}

impl ControlBranch {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            edge: CondEncoder::new(&mut b, "edge", 1)?,
            color: CondEncoder::new(&mut b, "color", 3)?,
        })
    }

    /// `e [B,1,H,W]`, `c [B,3,H,W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, c: Var) -> Result<CondVars> {
        Ok(CondVars {
            edge: self.edge.forward(g, e)?,
            color: self.color.forward(g, c)?,
        })
    }
}

/// Residual conv block with additive timestep conditioning: `x + SiLU(conv(x) + proj(temb))`.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    temb: Dense,
}

impl Block {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, ch: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            conv: Conv2d::new(&mut b, "conv", ch, ch, 3, 1, 1, Init::Uniform)?,
            temb: Dense::new(&mut b, "temb", TEMB_HIDDEN, ch)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let t = self.temb.forward(g, temb)?;
        let h = g.add_channel(h, t)?;
        let h = g.silu(h)?;
        g.add(x, h)
    }
}

/// Residual cross-attention from every pixel to the semantic token.
fn attend<T: Real>(g: &mut Graph<'_, T>, att: &CrossAttention, x: Var, ctx: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let q = g.permute(x, &[0, 2, 3, 1])?;
    let q = g.reshape(q, &[b, h * w, c])?;
    let y = att.forward(g, q, ctx)?;
    let y = g.reshape(y, &[b, h, w, c])?;
    let y = g.permute(y, &[0, 3, 1, 2])?;
    g.add(x, y)
}

/// Three-resolution noise predictor with semantic cross-attention.
#[derive(Clone, Debug)]
pub struct Denoiser {
    t1: Dense,
    t2: Dense,
    conv_in: Conv2d,
    enc0: Block,
    down0: Conv2d,
    enc1: Block,
    down1: Conv2d,
    mid: Block,
    mid_attn: CrossAttention,
    /// Decoder blocks and attentions, indexed by site.
    dec: [Block; SITES],
    dec_attn: [CrossAttention; SITES],
    up0: ConvT2d,
    up1: ConvT2d,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str) -> Result<Self> {
        let mut b = bld.sub(name);
        let [w0, w1, w2] = WIDTHS;
        let mut dec = Vec::with_capacity(SITES);
        let mut dec_attn = Vec::with_capacity(SITES);
        for i in 0..SITES {
            let c = site_shape(i).0;
            dec.push(Block::new(&mut b, &format!("dec{i}"), c)?);
            dec_attn.push(CrossAttention::new(&mut b, &format!("dec{i}_attn"), c, D_S, ATTN_HEADS)?);
        }
        Ok(Self {
            t1: Dense::new(&mut b, "temb1", TEMB_DIM, TEMB_HIDDEN)?,
            t2: Dense::new(&mut b, "temb2", TEMB_HIDDEN, TEMB_HIDDEN)?,
            conv_in: Conv2d::new(&mut b, "conv_in", 3, w0, 3, 1, 1, Init::Uniform)?,
            enc0: Block::new(&mut b, "enc0", w0)?,
            down0: Conv2d::new(&mut b, "down0", w0, w1, 3, 2, 1, Init::Uniform)?,
            enc1: Block::new(&mut b, "enc1", w1)?,
            down1: Conv2d::new(&mut b, "down1", w1, w2, 3, 2, 1, Init::Uniform)?,
            mid: Block::new(&mut b, "mid", w2)?,
            mid_attn: CrossAttention::new(&mut b, "mid_attn", w2, D_S, ATTN_HEADS)?,
            dec: dec.try_into().map_err(|_| Error::Dimension("decoder blocks".into()))?,
            dec_attn: dec_attn.try_into().map_err(|_| Error::Dimension("decoder attention".into()))?,
            up0: ConvT2d::new(&mut b, "up0", w2, w1, 4, 2, 1)?,
            up1: ConvT2d::new(&mut b, "up1", w1, w0, 4, 2, 1)?,
            conv_out: Conv2d::new(&mut b, "conv_out", w0, 3, 3, 1, 1, Init::Zero)?,
        })
    }

    fn fuse<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        site: usize,
        f: Var,
        cond: &CondVars,
        fusion: Fusion<'_>,
        alphas: &mut Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        let (e, c) = (cond.edge[site], cond.color[site]);
        for v in [e, c] {
            if g.shape(v) != g.shape(f) {
                return dim_err(format!(
                    "site {site}: condition feature {:?} vs decoder feature {:?}",
                    g.shape(v),
                    g.shape(f)
                ));
            }
        }
        let (e, c) = match fusion {
            Fusion::Direct => (e, c),
            Fusion::Vcm(vcm) => {
                let (ae, ac) = vcm.alphas(g, site, f, e, c)?;
                if let Some(out) = alphas.as_deref_mut() {
                    out.push((ae, ac));
                }
                (g.mul_gate(e, ae)?, g.mul_gate(c, ac)?)
            }
            Fusion::Constant(a) => {
                let s = g.shape(f).to_vec();
                let gate = g.input(Tensor::full(&[s[0], 1, s[2], s[3]], T::lit(a)))?;
                (g.mul_gate(e, gate)?, g.mul_gate(c, gate)?)
            }
        };
        let h = g.add(f, e)?;
        g.add(h, c)
    }

    /// Predicts the noise in `x [B,3,H,W]` at timesteps `ts` given the
    /// semantic embedding `s [B,D_S]` and per-site condition features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        ts: &[usize],
        s: Var,
        cond: &CondVars,
        fusion: Fusion<'_>,
        mut alphas: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let b = xs[0];
        if xs != [b, 3, IMG, IMG] || ts.len() != b || g.shape(s) != [b, D_S] {
            return dim_err(format!("denoiser: x {xs:?}, {} timesteps, s {:?}", ts.len(), g.shape(s)));
        }
        let te = g.input(timestep_embedding(ts)?)?;
        let te = self.t1.forward(g, te)?;
        let te = g.silu(te)?;
        let te = self.t2.forward(g, te)?;
        let ctx = g.reshape(s, &[b, 1, D_S])?;

        let h = self.conv_in.forward(g, x)?;
        let skip0 = self.enc0.forward(g, h, te)?;
        let h = self.down0.forward(g, skip0)?;
        let skip1 = self.enc1.forward(g, h, te)?;
        let h = self.down1.forward(g, skip1)?;
        let h = self.mid.forward(g, h, te)?;
        let mut h = attend(g, &self.mid_attn, h, ctx)?;

        for site in 0..SITES {
            h = match site {
                0 => h,
                1 => g.add(h, skip1)?,
                _ => g.add(h, skip0)?,
            };
            h = self.fuse(g, site, h, cond, fusion, &mut alphas)?;
            h = self.dec[site].forward(g, h, te)?;
            h = attend(g, &self.dec_attn[site], h, ctx)?;
            h = match site {
                0 => self.up0.forward(g, h)?,
                1 => self.up1.forward(g, h)?,
                _ => h,
            };
        }
        let h = g.silu(h)?;
        self.conv_out.forward(g, h)
    }
}
