use rand::Rng;

use crate::diffusion::{site_shape, SITES};
use crate::error::{dim_err, Result};
use crate::nn::{Builder, Conv2d, Graph, Init, Real, Var};

pub const VCM_HIDDEN: usize = 8;
/// Weights live in `[ALPHA_EPS, 1 − ALPHA_EPS]`; exact in f32.
pub const ALPHA_EPS: f64 = 1.0 / 1_048_576.0;

/// Three 3×3 convs with SiLU, then a zero-initialized 1×1 conv to two gate logits.
#[derive(Clone, Debug)]
pub struct VcmHead {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    out: Conv2d,
}

impl VcmHead {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, ch: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            c1: Conv2d::new(&mut b, "c1", 3 * ch, VCM_HIDDEN, 3, 1, 1, Init::Uniform)?,
            c2: Conv2d::new(&mut b, "c2", VCM_HIDDEN, VCM_HIDDEN, 3, 1, 1, Init::Uniform)?,
            c3: Conv2d::new(&mut b, "c3", VCM_HIDDEN, VCM_HIDDEN, 3, 1, 1, Init::Uniform)?,
            out: Conv2d::new(&mut b, "out", VCM_HIDDEN, 2, 1, 1, 0, Init::Zero)?,
        })
    }
}

/// Visual coherence module: one head per injection site.
#[derive(Clone, Debug)]
pub struct Vcm {
    pub heads: Vec<VcmHead>,
}

impl Vcm {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str) -> Result<Self> {
        let mut b = bld.sub(name);
        let heads = (0..SITES)
            .map(|i| VcmHead::new(&mut b, &format!("site{i}"), site_shape(i).0))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    /// `(α_e, α_c)`, each `[B,1,H,W]`, from `concat(F, Ê, Ĉ)` at `site`.
    ///
    /// The gate is `½ + (½ − ε)·tanh(z/2)`, a sigmoid squeezed into the open interval.
    pub fn alphas<T: Real>(&self, g: &mut Graph<'_, T>, site: usize, f: Var, e: Var, c: Var) -> Result<(Var, Var)> {
        let head = self
            .heads
            .get(site)
            .ok_or_else(|| crate::Error::Dimension(format!("VCM has no head for site {site}")))?;
        let s = g.shape(f).to_vec();
        if g.shape(e) != s.as_slice() || g.shape(c) != s.as_slice() || s.len() != 4 || s[1] != site_shape(site).0 {
            return dim_err(format!("vcm site {site}: F {s:?}, E {:?}, C {:?}", g.shape(e), g.shape(c)));
        }
        let x = g.concat(&[f, e, c], 1)?;
        let mut h = x;
        for conv in [&head.c1, &head.c2, &head.c3] {
            h = conv.forward(g, h)?;
            h = g.silu(h)?;
        }
        let z = head.out.forward(g, h)?;
        let z = g.scale(z, 0.5)?;
        let z = g.tanh(z)?;
        let a = g.affine(z, 0.5 - ALPHA_EPS, 0.5)?;
        Ok((g.slice(a, 1, 0, 1)?, g.slice(a, 1, 1, 1)?))
    }
}
