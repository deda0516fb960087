use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvT2d, Dense, Graph, Init, LayerNorm, ParamStore, Real, Spread, Tensor, Var};
use crate::representations::{D_S, IMG};
use crate::rng::rng;
use crate::subject_sim::D_V;

pub const D_LAT: usize = 128;
pub const SBMM_EPS: f64 = 1e-5;
const FEAT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    Um,
    NoSbmm,
    SubjectSpecific,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "um" => Ok(Variant::Um),
            "no-sbmm" | "no_sbmm" => Ok(Variant::NoSbmm),
            "subject-specific" | "subject_specific" => Ok(Variant::SubjectSpecific),
            _ => Err(Error::Config(format!("unknown variant {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Encoder,
    Decoder,
}

impl Site {
    fn tag(self) -> &'static str {
        match self {
            Site::Encoder => "enc",
            Site::Decoder => "dec",
        }
    }
}

/// Subject bias modulation: `W(X) ⊙ (X − μ)/(σ + ε) + B(X)` with per-sample feature statistics.
#[derive(Clone, Debug)]
pub struct Sbmm {
    pub w: Dense,
    pub b: Dense,
}

impl Sbmm {
    /// Starts as plain standardization: W-MLP outputs ones, B-MLP zeros.
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, dim: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        let w = Dense::with_init(&mut b, "w", dim, dim, Init::Zero)?;
        b.store.get_mut(w.b).data_mut().fill(1.0);
        let bias = Dense::with_init(&mut b, "b", dim, dim, Init::Zero)?;
        Ok(Self { w, b: bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.standardize(x, SBMM_EPS, Spread::StdPlusEps)?;
        let w = self.w.forward(g, x)?;
        let b = self.b.forward(g, x)?;
        let y = g.mul(w, n)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
struct ConvEncoder {
    c1: Conv2d,
    c2: Conv2d,
    out: Dense,
}

impl ConvEncoder {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, cin: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            c1: Conv2d::new(&mut b, "conv1", cin, 8, 3, 2, 1, Init::Uniform)?,
            c2: Conv2d::new(&mut b, "conv2", 8, 16, 3, 2, 1, Init::Uniform)?,
            out: Dense::new(&mut b, "out", 16 * 4 * 4, FEAT)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let h = self.c1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.c2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = g.avg_pool2d(h, 2)?;
        let h = g.reshape(h, &[b, 16 * 4 * 4])?;
        self.out.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OutAct {
    Sigmoid,
    UnitTanh,
}

#[derive(Clone, Debug)]
struct ConvDecoder {
    inp: Dense,
    t1: ConvT2d,
    t2: ConvT2d,
    act: OutAct,
    cout: usize,
}

impl ConvDecoder {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, cout: usize, act: OutAct) -> Result<Self> {
        let mut b = bld.sub(name);
        Ok(Self {
            inp: Dense::new(&mut b, "in", D_LAT, 16 * 8 * 8)?,
            t1: ConvT2d::new(&mut b, "up1", 16, 16, 4, 2, 1)?,
            t2: ConvT2d::new(&mut b, "up2", 16, cout, 4, 2, 1)?,
            act,
            cout,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let h = self.inp.forward(g, z)?;
        let h = g.silu(h)?;
        let h = g.reshape(h, &[b, 16, 8, 8])?;
        let h = self.t1.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.t2.forward(g, h)?;
        debug_assert_eq!(g.shape(h), &[b, self.cout, IMG, IMG]);
        match self.act {
            OutAct::Sigmoid => g.sigmoid(h),
            OutAct::UnitTanh => {
                let t = g.tanh(h)?;
                g.affine(t, 0.5, 0.5)
            }
        }
    }
}

/// Residual MLP: blocks of dense → GELU → dense with an identity skip.
#[derive(Clone, Debug)]
pub struct ResMlp {
    blocks: Vec<(Dense, Dense)>,
}

impl ResMlp {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, name: &str, dim: usize, n_blocks: usize) -> Result<Self> {
        let mut b = bld.sub(name);
        let blocks = (0..n_blocks)
            .map(|i| {
                let mut bb = b.sub(&format!("block{i}"));
                Ok((Dense::new(&mut bb, "fc1", dim, dim)?, Dense::new(&mut bb, "fc2", dim, dim)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (a, b) in &self.blocks {
            let y = a.forward(g, h)?;
            let y = g.gelu(y)?;
            let y = b.forward(g, y)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }
}

/// Evaluation counts of the voxel decoder and the representation-to-voxel translator.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub decode_fmri: AtomicUsize,
    pub translate_r2v: AtomicUsize,
}

/// Layer layout of the intertwined autoencoders. Holds only parameter ids.
#[derive(Clone, Debug)]
pub struct BaiArch {
    pub variant: Variant,
    enc_dense: Dense,
    enc_ln: LayerNorm,
    dec_dense1: Dense,
    dec_ln: LayerNorm,
    dec_dense2: Dense,
    sbmm: BTreeMap<(u32, Site), Sbmm>,
    edge_enc: ConvEncoder,
    color_enc: ConvEncoder,
    s_enc: (Dense, Dense),
    fuse: Dense,
    edge_dec: ConvDecoder,
    color_dec: ConvDecoder,
    s_dec: (Dense, Dense),
    t_v2r: ResMlp,
    t_r2v: ResMlp,
    pub counters: Arc<CallCounters>,
}

/// Batched representations: `s [B,D_S]`, `e [B,1,H,W]`, `c [B,3,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct Reps {
    pub s: Var,
    pub e: Var,
    pub c: Var,
}

pub fn sbmm_prefix(subject: u32) -> String {
    format!("sbmm/{subject}/")
}

impl BaiArch {
    /// Builds the architecture and registers freshly initialized parameters.
    pub fn build(variant: Variant, subjects: &[u32], seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let mut b = Builder::new(&mut store, &mut r, "");
        let mut fe = b.sub("fmri_enc");
        let enc_dense = Dense::new(&mut fe, "dense", D_V, D_LAT)?;
        let enc_ln = LayerNorm::new(&mut fe, "ln", D_LAT)?;
        let mut fd = b.sub("fmri_dec");
        let dec_dense1 = Dense::new(&mut fd, "dense1", D_LAT, D_LAT)?;
        let dec_ln = LayerNorm::new(&mut fd, "ln", D_LAT)?;
        let dec_dense2 = Dense::new(&mut fd, "dense2", D_LAT, D_V)?;
        let mut re = b.sub("rep_enc");
        let edge_enc = ConvEncoder::new(&mut re, "edge", 1)?;
        let color_enc = ConvEncoder::new(&mut re, "color", 3)?;
        let s_enc = (Dense::new(&mut re, "sem1", D_S, FEAT)?, Dense::new(&mut re, "sem2", FEAT, FEAT)?);
        let fuse = Dense::new(&mut re, "fuse", 3 * FEAT, D_LAT)?;
        let mut rd = b.sub("rep_dec");
        let edge_dec = ConvDecoder::new(&mut rd, "edge", 1, OutAct::Sigmoid)?;
        let color_dec = ConvDecoder::new(&mut rd, "color", 3, OutAct::UnitTanh)?;
        let s_dec = (Dense::new(&mut rd, "sem1", D_LAT, FEAT)?, Dense::new(&mut rd, "sem2", FEAT, D_S)?);
        let t_v2r = ResMlp::new(&mut b, "t_v2r", D_LAT, 4)?;
        let t_r2v = ResMlp::new(&mut b, "t_r2v", D_LAT, 4)?;
        let mut arch = Self {
            variant,
            enc_dense,
            enc_ln,
            dec_dense1,
            dec_ln,
            dec_dense2,
            sbmm: BTreeMap::new(),
            edge_enc,
            color_enc,
            s_enc,
            fuse,
            edge_dec,
            color_dec,
            s_dec,
            t_v2r,
            t_r2v,
            counters: Arc::new(CallCounters::default()),
        };
        for &s in subjects {
            arch.add_subject(&mut store, s, seed)?;
        }
        Ok((arch, store))
    }

    /// Registers a fresh SBMM pair for `subject` (identity-like init).
    pub fn add_subject(&mut self, store: &mut ParamStore<f32>, subject: u32, seed: u64) -> Result<()> {
        if self.has_subject(subject) {
            return Err(Error::SubjectConflict(subject));
        }
        let mut r = rng(seed ^ subject as u64);
        let mut b = Builder::new(store, &mut r, &format!("sbmm/{subject}"));
        for site in [Site::Encoder, Site::Decoder] {
            let m = Sbmm::new(&mut b, site.tag(), D_LAT)?;
            self.sbmm.insert((subject, site), m);
        }
        Ok(())
    }

    pub fn has_subject(&self, subject: u32) -> bool {
        self.sbmm.contains_key(&(subject, Site::Encoder))
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.sbmm.keys().filter(|(_, s)| *s == Site::Encoder).map(|(k, _)| *k).collect()
    }

    fn uses_sbmm(&self) -> bool {
        self.variant != Variant::NoSbmm
    }

    pub fn sbmm<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, subject: u32, site: Site) -> Result<Var> {
        let m = self.sbmm.get(&(subject, site)).ok_or(Error::MissingSubject(subject))?;
        m.forward(g, x)
    }

    fn check_subject(&self, subject: u32) -> Result<()> {
        if self.has_subject(subject) {
            Ok(())
        } else {
            Err(Error::MissingSubject(subject))
        }
    }

    /// `V [B,D_V]` → latent `[B,D_LAT]`.
    pub fn encode_fmri<T: Real>(&self, g: &mut Graph<'_, T>, v: Var, subject: u32) -> Result<Var> {
        self.check_subject(subject)?;
        let h = self.enc_dense.forward(g, v)?;
        let h = self.enc_ln.forward(g, h)?;
        if self.uses_sbmm() {
            self.sbmm(g, h, subject, Site::Encoder)
        } else {
            Ok(h)
        }
    }

    pub fn decode_fmri<T: Real>(&self, g: &mut Graph<'_, T>, z: Var, subject: u32) -> Result<Var> {
        self.check_subject(subject)?;
        self.counters.decode_fmri.fetch_add(1, Ordering::Relaxed);
        let h = if self.uses_sbmm() { self.sbmm(g, z, subject, Site::Decoder)? } else { z };
        let h = self.dec_dense1.forward(g, h)?;
        let h = self.dec_ln.forward(g, h)?;
        let h = g.silu(h)?;
        self.dec_dense2.forward(g, h)
    }

    pub fn encode_reps<T: Real>(&self, g: &mut Graph<'_, T>, r: Reps) -> Result<Var> {
        let fe = self.edge_enc.forward(g, r.e)?;
        let fc = self.color_enc.forward(g, r.c)?;
        let fs = self.s_enc.0.forward(g, r.s)?;
        let fs = g.silu(fs)?;
        let fs = self.s_enc.1.forward(g, fs)?;
        let f = g.concat(&[fs, fe, fc], 1)?;
        let f = g.silu(f)?;
        self.fuse.forward(g, f)
    }

    pub fn decode_reps<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Reps> {
        let s = self.s_dec.0.forward(g, z)?;
        let s = g.silu(s)?;
        let s = self.s_dec.1.forward(g, s)?;
        let e = self.edge_dec.forward(g, z)?;
        let c = self.color_dec.forward(g, z)?;
        Ok(Reps { s, e, c })
    }

    pub fn t_v2r<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        self.t_v2r.forward(g, z)
    }

    pub fn t_r2v<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        self.counters.translate_r2v.fetch_add(1, Ordering::Relaxed);
        self.t_r2v.forward(g, z)
    }

    /// `decode_reps(T_v2r(encode_fmri(V)))`.
    pub fn translate_v2r<T: Real>(&self, g: &mut Graph<'_, T>, v: Var, subject: u32) -> Result<Reps> {
        let z = self.encode_fmri(g, v, subject)?;
        let z = self.t_v2r(g, z)?;
        self.decode_reps(g, z)
    }

    /// `decode_fmri(T_r2v(encode_reps(R)), subject)`.
    pub fn translate_r2v<T: Real>(&self, g: &mut Graph<'_, T>, r: Reps, subject: u32) -> Result<Var> {
        self.check_subject(subject)?;
        let z = self.encode_reps(g, r)?;
        let z = self.t_r2v(g, z)?;
        self.decode_fmri(g, z, subject)
    }

    pub fn cycle_reps<T: Real>(&self, g: &mut Graph<'_, T>, r: Reps, subject: u32) -> Result<Reps> {
        let v = self.translate_r2v(g, r, subject)?;
        self.translate_v2r(g, v, subject)
    }

    pub fn cycle_voxels<T: Real>(&self, g: &mut Graph<'_, T>, v: Var, subject: u32) -> Result<Var> {
        let r = self.translate_v2r(g, v, subject)?;
        self.translate_r2v(g, r, subject)
    }
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct BaiModel {
    pub arch: BaiArch,
    pub params: ParamStore<f32>,
    pub seed: u64,
}

/// Host-side batch of representations.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBatch {
    pub s: Tensor<f32>,
    pub e: Tensor<f32>,
    pub c: Tensor<f32>,
}

impl RepBatch {
    pub fn len(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_triples(ts: &[&crate::representations::RepresentationTriple]) -> Result<Self> {
        let n = ts.len();
        let cat = |f: &dyn Fn(&crate::representations::RepresentationTriple) -> &[f32]| -> Vec<f32> {
            ts.iter().flat_map(|t| f(t).iter().copied()).collect()
        };
        Ok(Self {
            s: Tensor::new(vec![n, D_S], cat(&|t| &t.s))?,
            e: Tensor::new(vec![n, 1, IMG, IMG], cat(&|t| &t.e))?,
            c: Tensor::new(vec![n, 3, IMG, IMG], cat(&|t| &t.c))?,
        })
    }

    pub fn input<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Reps> {
        Ok(Reps {
            s: g.input(self.s.cast())?,
            e: g.input(self.e.cast())?,
            c: g.input(self.c.cast())?,
        })
    }

    pub fn read<T: Real>(g: &Graph<'_, T>, r: Reps) -> Self {
        Self {
            s: g.value(r.s).cast(),
            e: g.value(r.e).cast(),
            c: g.value(r.c).cast(),
        }
    }

    /// Per-item triples.
    pub fn triples(&self) -> Vec<crate::representations::RepresentationTriple> {
        (0..self.len())
            .map(|i| crate::representations::RepresentationTriple {
                s: self.s.row(i).to_vec(),
                e: self.e.row(i).to_vec(),
                c: self.c.row(i).to_vec(),
            })
            .collect()
    }
}

pub fn voxel_tensor(v: &[&[f32]]) -> Result<Tensor<f32>> {
    let n = v.len();
    Tensor::new(vec![n, D_V], v.iter().flat_map(|r| r.iter().copied()).collect())
}

impl BaiModel {
    pub fn new(variant: Variant, subjects: &[u32], seed: u64) -> Result<Self> {
        let (arch, params) = BaiArch::build(variant, subjects, seed)?;
        Ok(Self { arch, params, seed })
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.arch.subjects()
    }

    pub fn encode_fmri(&self, v: &Tensor<f32>, subject: u32) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(v.clone())?;
        let z = self.arch.encode_fmri(&mut g, x, subject)?;
        Ok(g.value(z).clone())
    }

    pub fn translate_v2r(&self, v: &Tensor<f32>, subject: u32) -> Result<RepBatch> {
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(v.clone())?;
        let r = self.arch.translate_v2r(&mut g, x, subject)?;
        Ok(RepBatch::read(&g, r))
    }

    pub fn translate_r2v(&self, reps: &RepBatch, subject: u32) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params).frozen();
        let r = reps.input(&mut g)?;
        let v = self.arch.translate_r2v(&mut g, r, subject)?;
        Ok(g.value(v).clone())
    }

    /// Representation autoencoder round trip `decode_reps(encode_reps(R))`.
    pub fn reconstruct_reps(&self, reps: &RepBatch) -> Result<RepBatch> {
        let mut g = Graph::with_params(&self.params).frozen();
        let r = reps.input(&mut g)?;
        let z = self.arch.encode_reps(&mut g, r)?;
        let out = self.arch.decode_reps(&mut g, z)?;
        Ok(RepBatch::read(&g, out))
    }

    pub fn reconstruct_voxels(&self, v: &Tensor<f32>, subject: u32) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(v.clone())?;
        let z = self.arch.encode_fmri(&mut g, x, subject)?;
        let y = self.arch.decode_fmri(&mut g, z, subject)?;
        Ok(g.value(y).clone())
    }

    /// Digest of every parameter outside `subject`'s SBMM pair.
    pub fn digest_except_subject(&self, subject: u32) -> String {
        let p = sbmm_prefix(subject);
        self.params.digest_where(|n| !n.starts_with(&p))
    }
}
