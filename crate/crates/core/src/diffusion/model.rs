use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, DDIM_STEPS};
use super::unet::{CondFeatures, CondVars, ControlBranch, Denoiser, Fusion, FusionMode};
use crate::bai::RepBatch;
use crate::container::{Table, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Builder, Graph, ParamStore, Tensor, Var};
use crate::refinement::{RefineArch, RefineConfig};
use crate::representations::{Image, RepresentationTriple, D_S, IMG};
use crate::rng::{derive, rng, rng_at};
use crate::subject_sim::Dataset;

pub const DIFFUSION_PREFIX: &str = "diffusion/";
pub const DIFFUSION_MANIFEST: &str = "diffusion/manifest";
pub const REFINE_PREFIX: &str = "refine/";
pub const REFINE_MANIFEST: &str = "refine/manifest";
const PIXELS: usize = 3 * IMG * IMG;
const SAMPLE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Cap on training images, drawn evenly from every subject's split.
    pub max_images: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 32,
            epochs: 8,
            seed: 11,
            max_images: 3000,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.max_images == 0 {
            return Err(Error::Config("batch, epochs and max_images must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionArch {
    pub denoiser: Denoiser,
    pub branch: ControlBranch,
}

impl DiffusionArch {
    pub fn build(store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        let mut r = rng(derive(seed, &[0xd1ff]));
        let mut b = Builder::new(store, &mut r, "diffusion");
        Ok(Self {
            denoiser: Denoiser::new(&mut b, "unet")?,
            branch: ControlBranch::new(&mut b, "control")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionManifest {
    pub seed: u64,
    pub t_steps: usize,
    pub n_params: usize,
    pub training: Option<DiffusionConfig>,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineManifest {
    pub seed: u64,
    pub n_params: usize,
    pub training: Option<RefineConfig>,
    pub loss_history: Vec<f64>,
}

/// Denoiser and control branch, optionally with SRM/VCM, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub arch: DiffusionArch,
    pub refine: Option<RefineArch>,
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub refine_seed: Option<u64>,
}

/// Images in `[0,1]` as a `[B,3,H,W]` tensor rescaled to `[−1,1]`.
pub fn image_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * PIXELS);
    for im in images {
        if (im.channels, im.height, im.width) != (3, IMG, IMG) {
            return Err(Error::Dimension(format!("image {}x{}x{}", im.channels, im.height, im.width)));
        }
        data.extend(im.data.iter().map(|&v| 2.0 * v - 1.0));
    }
    Tensor::new(vec![images.len(), 3, IMG, IMG], data)
}

/// Inverse of [`image_tensor`], clamped to `[0,1]`.
pub fn tensor_images(x: &Tensor<f32>) -> Result<Vec<Image>> {
    (0..x.shape()[0])
        .map(|i| Image::new(3, IMG, IMG, x.row(i).iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()))
        .collect()
}

/// Seeded `x_T` for one item.
pub fn initial_noise(seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..PIXELS).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Timesteps, noise and noised inputs for one training batch.
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor<f32>,
    pub x_t: Tensor<f32>,
}

pub fn draw_noise(schedule: &NoiseSchedule, x0: &Tensor<f32>, seed: u64, path: &[u64]) -> Result<NoiseDraw> {
    let mut r = rng_at(seed, path);
    let b = x0.shape()[0];
    let per = x0.numel() / b;
    let mut ts = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(x0.numel());
    let mut x_t = Vec::with_capacity(x0.numel());
    for i in 0..b {
        let t = r.random_range(0..schedule.len());
        let e: Vec<f32> = (0..per).map(|_| StandardNormal.sample(&mut r)).collect();
        x_t.extend(schedule.forward_diffuse(x0.row(i), t, &e)?);
        eps.extend(e);
        ts.push(t);
    }
    Ok(NoiseDraw {
        ts,
        eps: Tensor::new(x0.shape().to_vec(), eps)?,
        x_t: Tensor::new(x0.shape().to_vec(), x_t)?,
    })
}

/// Edge and color condition tensors of a representation batch.
pub fn cond_inputs(g: &mut Graph<'_, f32>, reps: &RepBatch) -> Result<(Var, Var)> {
    Ok((g.input(reps.e.clone())?, g.input(reps.c.clone())?))
}

impl DiffusionModel {
    pub fn new(seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = DiffusionArch::build(&mut params, seed)?;
        Ok(Self {
            arch,
            refine: None,
            params,
            schedule: NoiseSchedule::default(),
            seed,
            refine_seed: None,
        })
    }

    /// Adds freshly initialized SRM/VCM parameters.
    pub fn attach_refine(&mut self, seed: u64) -> Result<()> {
        if self.refine.is_some() {
            return Err(Error::Config("model already has refinement modules".into()));
        }
        self.refine = Some(RefineArch::build(&mut self.params, seed)?);
        self.refine_seed = Some(seed);
        Ok(())
    }

    pub fn n_params(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.numel()).sum()
    }

    /// Digest of the denoiser and branch parameters.
    pub fn diffusion_digest(&self) -> String {
        self.params.digest_where(|n| n.starts_with(DIFFUSION_PREFIX))
    }

    pub fn fusion(&self, mode: FusionMode) -> Result<Fusion<'_>> {
        match mode {
            FusionMode::Direct => Ok(Fusion::Direct),
            FusionMode::Vcm => self
                .refine
                .as_ref()
                .map(|r| Fusion::Vcm(&r.vcm))
                .ok_or_else(|| Error::Config("vcm fusion needs a trained VCM (load refinement modules)".into())),
        }
    }

    /// Per-site condition features of edge maps `[B,1,H,W]` and palettes `[B,3,H,W]`.
    pub fn cond_features(&self, reps: &RepBatch) -> Result<CondFeatures> {
        let mut g = Graph::with_params(&self.params).frozen();
        let (e, c) = cond_inputs(&mut g, reps)?;
        let v = self.arch.branch.forward(&mut g, e, c)?;
        Ok(CondFeatures::read(&g, &v))
    }

    pub fn refine_semantic(&self, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        let r = self
            .refine
            .as_ref()
            .ok_or_else(|| Error::Config("semantic refinement needs a trained SRM".into()))?;
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(s.clone())?;
        let y = r.srm.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Noise prediction with gradients disabled.
    pub fn predict_eps(&self, x_t: &Tensor<f32>, ts: &[usize], s: &Tensor<f32>, cond: &CondFeatures, fusion: Fusion<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(x_t.clone())?;
        let sv = g.input(s.clone())?;
        let cv = cond.input(&mut g)?;
        let y = self.arch.denoiser.forward(&mut g, x, ts, sv, &cv, fusion, None)?;
        Ok(g.value(y).clone())
    }

    /// Gate maps `(α_e, α_c)` per site for noised inputs, `[B,1,H_i,W_i]` each.
    pub fn alpha_maps(&self, x_t: &Tensor<f32>, ts: &[usize], s: &Tensor<f32>, cond: &CondFeatures) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        let fusion = self.fusion(FusionMode::Vcm)?;
        let mut g = Graph::with_params(&self.params).frozen();
        let x = g.input(x_t.clone())?;
        let sv = g.input(s.clone())?;
        let cv = cond.input(&mut g)?;
        let mut out = Vec::new();
        self.arch.denoiser.forward(&mut g, x, ts, sv, &cv, fusion, Some(&mut out))?;
        Ok(out.into_iter().map(|(a, b)| (g.value(a).clone(), g.value(b).clone())).collect())
    }

    /// Deterministic DDIM from per-item seeded noise. `s` is `[B,D_S]`.
    pub fn ddim(&self, s: &Tensor<f32>, cond: &CondFeatures, fusion: Fusion<'_>, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        let b = seeds.len();
        if s.shape() != [b, D_S] || cond.batch() != b {
            return Err(Error::Dimension(format!("ddim: {b} seeds, s {:?}, {} condition rows", s.shape(), cond.batch())));
        }
        let x_t = Tensor::new(vec![b, 3, IMG, IMG], seeds.iter().flat_map(|&sd| initial_noise(sd)).collect())?;
        let x0 = self.schedule.ddim_sample(steps, x_t, |x, t| self.predict_eps(x, &vec![t; b], s, cond, fusion))?;
        tensor_images(&x0)
    }

    /// [`Self::ddim`] over any number of items in fixed-size chunks.
    pub fn ddim_many(&self, s: &Tensor<f32>, cond: &CondFeatures, fusion: Fusion<'_>, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(seeds.len());
        let idx: Vec<usize> = (0..seeds.len()).collect();
        for chunk in idx.chunks(SAMPLE_CHUNK) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| s.row(i)).collect();
            let sc = Tensor::new(vec![chunk.len(), D_S], rows.concat())?;
            let cc = cond.select(chunk)?;
            let sd: Vec<u64> = chunk.iter().map(|&i| seeds[i]).collect();
            out.extend(self.ddim(&sc, &cc, fusion, steps, &sd)?);
        }
        Ok(out)
    }

    /// Samples conditioned on representation triples, in direct or VCM mode.
    pub fn sample_triples(&self, triples: &[&RepresentationTriple], mode: FusionMode, seeds: &[u64]) -> Result<Vec<Image>> {
        let reps = RepBatch::from_triples(triples)?;
        let cond = self.cond_features(&reps)?;
        self.ddim_many(&reps.s, &cond, self.fusion(mode)?, DDIM_STEPS, seeds)
    }

    /// Samples with zero semantic context and zero condition features.
    pub fn sample_unconditional(&self, seeds: &[u64]) -> Result<Vec<Image>> {
        let n = seeds.len();
        let s = Tensor::zeros(&[n, D_S]);
        self.ddim_many(&s, &CondFeatures::zeros(n), Fusion::Direct, DDIM_STEPS, seeds)
    }

    pub fn write_diffusion(&self, t: &mut Table, training: Option<&DiffusionConfig>, history: &[f64]) -> Result<()> {
        t.put_json(
            DIFFUSION_MANIFEST,
            &DiffusionManifest {
                seed: self.seed,
                t_steps: self.schedule.len(),
                n_params: self.n_params(DIFFUSION_PREFIX),
                training: training.cloned(),
                loss_history: history.to_vec(),
            },
        )?;
        t.put_params_where("", &self.params, |n| n.starts_with(DIFFUSION_PREFIX))
    }

    pub fn write_refine(&self, t: &mut Table, training: Option<&RefineConfig>, history: &[f64]) -> Result<()> {
        let seed = self
            .refine_seed
            .ok_or_else(|| Error::Config("model has no refinement modules".into()))?;
        t.put_json(
            REFINE_MANIFEST,
            &RefineManifest {
                seed,
                n_params: self.n_params(REFINE_PREFIX),
                training: training.cloned(),
                loss_history: history.to_vec(),
            },
        )?;
        t.put_params_where("", &self.params, |n| n.starts_with(REFINE_PREFIX))
    }

    pub fn read_diffusion(t: &Table) -> Result<(Self, DiffusionManifest)> {
        let man: DiffusionManifest = t.json(DIFFUSION_MANIFEST)?;
        let mut m = Self::new(man.seed)?;
        if man.t_steps != m.schedule.len() || man.n_params != m.n_params(DIFFUSION_PREFIX) {
            return Err(Error::Format(format!(
                "diffusion checkpoint has T={} and {} parameters; this build has T={} and {}",
                man.t_steps,
                man.n_params,
                m.schedule.len(),
                m.n_params(DIFFUSION_PREFIX)
            )));
        }
        t.load_params_where("", &mut m.params, |n| n.starts_with(DIFFUSION_PREFIX))?;
        Ok((m, man))
    }

    pub fn read_refine(&mut self, t: &Table) -> Result<RefineManifest> {
        let man: RefineManifest = t.json(REFINE_MANIFEST)?;
        self.attach_refine(man.seed)?;
        t.load_params_where("", &mut self.params, |n| n.starts_with(REFINE_PREFIX))?;
        Ok(man)
    }

    pub fn save_diffusion(&self, path: &Path, training: Option<&DiffusionConfig>, history: &[f64]) -> Result<()> {
        let mut t = Table::new();
        self.write_diffusion(&mut t, training, history)?;
        t.save(path, CHECKPOINT_MAGIC)
    }

    pub fn save_refine(&self, path: &Path, training: Option<&RefineConfig>, history: &[f64]) -> Result<()> {
        let mut t = Table::new();
        self.write_refine(&mut t, training, history)?;
        t.save(path, CHECKPOINT_MAGIC)
    }

    pub fn load_diffusion(path: &Path) -> Result<(Self, DiffusionManifest)> {
        Self::read_diffusion(&Table::load(path, CHECKPOINT_MAGIC)?)
    }

    pub fn load_refine(&mut self, path: &Path) -> Result<RefineManifest> {
        self.read_refine(&Table::load(path, CHECKPOINT_MAGIC)?)
    }
}

/// Training images: an even share from every subject's split, in subject order.
pub fn training_samples<'a>(data: &'a Dataset, max_images: usize) -> Vec<&'a crate::subject_sim::Sample> {
    let n_sub = data.train.len().max(1);
    let per = max_images.div_ceil(n_sub);
    let mut out: Vec<_> = data.train.values().flat_map(|s| s.samples.iter().take(per)).collect();
    out.truncate(max_images);
    out
}

/// Noise-prediction training of denoiser and branches on ground-truth conditions, direct fusion.
pub fn train_denoiser(data: &Dataset, cfg: &DiffusionConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<(DiffusionModel, Vec<f64>)> {
    cfg.validate()?;
    let samples = training_samples(data, cfg.max_images);
    if samples.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut model = DiffusionModel::new(cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr as f32).with_weight_decay(cfg.weight_decay as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_at(cfg.seed, &[0xd0e9, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &samples[i].image).collect();
            let triples: Vec<&RepresentationTriple> = idx.iter().map(|&i| &samples[i].triple).collect();
            let x0 = image_tensor(&imgs)?;
            let reps = RepBatch::from_triples(&triples)?;
            let nd = draw_noise(&model.schedule, &x0, cfg.seed, &[0x7015e, epoch as u64, bi as u64])?;
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let x = g.input(nd.x_t)?;
                let s = g.input(reps.s.clone())?;
                let (e, c) = cond_inputs(&mut g, &reps)?;
                let cond: CondVars = model.arch.branch.forward(&mut g, e, c)?;
                let pred = model.arch.denoiser.forward(&mut g, x, &nd.ts, s, &cond, Fusion::Direct, None)?;
                let target = g.input(nd.eps)?;
                let loss = g.mse(pred, target)?;
                let l = g.value(loss).item() as f64;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!("diffusion training: noise loss is {l} at epoch {epoch}")));
                }
                sum += l * idx.len() as f64;
                count += idx.len();
                g.backward(loss)?
            };
            opt.step(&mut model.params, &grads)?;
        }
        let mean = sum / count as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((model, history))
}
