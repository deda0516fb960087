use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::{Builder, CrossAttention, Dense, Graph, Init, LayerNorm, ParamId, Real, Var};
use crate::representations::D_S;

pub const SRM_QUERIES: usize = 8;
pub const SRM_DIM: usize = 32;
pub const SRM_LAYERS: usize = 2;
const SRM_HEADS: usize = 2;
const SRM_FF: usize = 64;

#[derive(Clone, Debug)]
struct SrmLayer {
    ln1: LayerNorm,
    self_attn: CrossAttention,
    ln2: LayerNorm,
    cross: CrossAttention,
    ln3: LayerNorm,
    ff1: Dense,
    ff2: Dense,
}

impl SrmLayer {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut b, "ln1", SRM_DIM)?,
            self_attn: CrossAttention::new(&mut b, "self_attn", SRM_DIM, SRM_DIM, SRM_HEADS)?,
            ln2: LayerNorm::new(&mut b, "ln2", SRM_DIM)?,
            cross: CrossAttention::new(&mut b, "cross_attn", SRM_DIM, D_S, SRM_HEADS)?,
            ln3: LayerNorm::new(&mut b, "ln3", SRM_DIM)?,
            ff1: Dense::new(&mut b, "ff1", SRM_DIM, SRM_FF)?,
            ff2: Dense::new(&mut b, "ff2", SRM_FF, SRM_DIM)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.cross.forward(g, h, ctx)?;
        let x = g.add(x, h)?;
        let h = self.ln3.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Query transformer refining a semantic embedding: learned queries attend to
/// the input token, are mean-pooled and projected back to `D_S`.
///
/// The projection is zero-initialized and added to the input, so an untrained
/// module is the identity.
#[derive(Clone, Debug)]
pub struct Srm {
    queries: ParamId,
    layers: Vec<SrmLayer>,
    ln_out: LayerNorm,
    head: Dense,
}

impl Srm {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str) -> Result<Self> {
        let mut b = bld.sub(name);
        let queries = b.uniform("queries", &[SRM_QUERIES, SRM_DIM], 1)?;
        let layers = (0..SRM_LAYERS)
            .map(|i| SrmLayer::new(&mut b, &format!("layer{i}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            layers,
            ln_out: LayerNorm::new(&mut b, "ln_out", SRM_DIM)?,
            head: Dense::with_init(&mut b, "head", SRM_DIM, D_S, Init::Zero)?,
        })
    }

    /// `s [B,D_S]` → refined `[B,D_S]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<Var> {
        let sh = g.shape(s).to_vec();
        if sh.len() != 2 || sh[1] != D_S {
            return dim_err(format!("srm input {sh:?}, want [B, {D_S}]"));
        }
        let b = sh[0];
        let q = g.param(self.queries);
        let q = g.reshape(q, &[1, SRM_QUERIES, SRM_DIM])?;
        let mut x = if b == 1 { q } else { g.concat(&vec![q; b], 0)? };
        let ctx = g.reshape(s, &[b, 1, D_S])?;
        for layer in &self.layers {
            x = layer.forward(g, x, ctx)?;
        }
        let x = self.ln_out.forward(g, x)?;
        let pooled = g.mean_axis(x, 1)?;
        let d = self.head.forward(g, pooled)?;
        g.add(s, d)
    }
}

/// `1 − cos(a, b) + ‖a − b‖₂`, averaged over the batch.
pub fn srm_loss<T: Real>(g: &mut Graph<'_, T>, refined: Var, target: Var) -> Result<Var> {
    let c = g.cosine_loss(refined, target)?;
    let d = g.l2_dist(refined, target)?;
    g.add(c, d)
}
