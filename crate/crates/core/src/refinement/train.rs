use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pairs::ImprecisePairSet;
use super::srm::{srm_loss, Srm};
use super::vcm::Vcm;
use crate::bai::eval::cosine;
use crate::bai::RepBatch;
use crate::diffusion::{cond_inputs, draw_noise, image_tensor, DiffusionModel, Fusion, REFINE_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Builder, Graph, ParamStore, Tensor};
use crate::representations::{Image, RepresentationTriple, D_S};
use crate::rng::{derive, rng, rng_at};

#[derive(Clone, Debug)]
pub struct RefineArch {
    pub srm: Srm,
    pub vcm: Vcm,
}

impl RefineArch {
    pub fn build(store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        let mut r = rng(derive(seed, &[0x2ef1]));
        let mut b = Builder::new(store, &mut r, "refine");
        Ok(Self {
            srm: Srm::new(&mut b, "srm")?,
            vcm: Vcm::new(&mut b, "vcm")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 16,
            epochs: 6,
            seed: 5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

fn is_refine(name: &str) -> bool {
    name.starts_with(REFINE_PREFIX)
}

fn finite(l: f64, what: &str, epoch: usize) -> Result<f64> {
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::Numerical(format!("refinement training: {what} is {l} at epoch {epoch}")))
    }
}

/// Joint SRM + VCM training against the frozen denoiser and branches:
/// noise loss in VCM mode driven by imprecise conditions and refined
/// semantics, plus the SRM loss. Returns a copy of `base` carrying the
/// trained modules and the per-epoch mean joint loss.
pub fn train_refinement(
    base: &DiffusionModel,
    pairs: &ImprecisePairSet,
    cfg: &RefineConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(DiffusionModel, Vec<f64>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no imprecise pairs".into()));
    }
    if base.refine.is_some() {
        return Err(Error::Config("refinement training starts from a denoiser without SRM/VCM".into()));
    }
    let mut model = base.clone();
    model.attach_refine(cfg.seed)?;
    let frozen = model.diffusion_digest();

    let mut opt = AdamW::new(cfg.lr as f32).with_weight_decay(cfg.weight_decay as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng_at(cfg.seed, &[0x5e0f, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &pairs.images[i]).collect();
            let imp: Vec<&RepresentationTriple> = idx.iter().map(|&i| &pairs.imprecise[i]).collect();
            let gt_s: Vec<f32> = idx.iter().flat_map(|&i| pairs.gt[i].s.iter().copied()).collect();
            let x0 = image_tensor(&imgs)?;
            let reps = RepBatch::from_triples(&imp)?;
            let nd = draw_noise(&model.schedule, &x0, cfg.seed, &[0x2ef7, epoch as u64, bi as u64])?;
            let grads = {
                let refine = model.refine.as_ref().expect("attached above");
                let mut g = Graph::with_params(&model.params).train_only(|_, n| is_refine(n));
                let s_imp = g.input(reps.s.clone())?;
                let s_gt = g.input(Tensor::new(vec![idx.len(), D_S], gt_s)?)?;
                let s_ref = refine.srm.forward(&mut g, s_imp)?;
                let l_srm = srm_loss(&mut g, s_ref, s_gt)?;
                let (e, c) = cond_inputs(&mut g, &reps)?;
                let cond = model.arch.branch.forward(&mut g, e, c)?;
                let x = g.input(nd.x_t)?;
                let pred = model
                    .arch
                    .denoiser
                    .forward(&mut g, x, &nd.ts, s_ref, &cond, Fusion::Vcm(&refine.vcm), None)?;
                let target = g.input(nd.eps)?;
                let l_vcm = g.mse(pred, target)?;
                let total = g.add(l_vcm, l_srm)?;
                let l = finite(g.value(total).item() as f64, "joint loss", epoch)?;
                sum += l * idx.len() as f64;
                count += idx.len();
                g.backward(total)?
            };
            opt.step(&mut model.params, &grads)?;
        }
        let mean = sum / count as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    if model.diffusion_digest() != frozen {
        return Err(Error::ContractViolation("denoiser or branch parameters changed during refinement training".into()));
    }
    Ok((model, history))
}

/// SRM-only training on explicit (input, target) embedding pairs.
pub fn train_srm(
    model: &mut DiffusionModel,
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    cfg: &RefineConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Data(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let srm = model
        .refine
        .as_ref()
        .ok_or_else(|| Error::Config("SRM training needs attached refinement modules".into()))?
        .srm
        .clone();
    let srm_prefix = format!("{REFINE_PREFIX}srm/");
    let frozen = model.params.digest_where(|n| !n.starts_with(&srm_prefix));
    let rows = |v: &[Vec<f32>], idx: &[usize]| -> Result<Tensor<f32>> {
        Tensor::new(vec![idx.len(), D_S], idx.iter().flat_map(|&i| v[i].iter().copied()).collect())
    };
    let mut opt = AdamW::new(cfg.lr as f32).with_weight_decay(cfg.weight_decay as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng_at(cfg.seed, &[0x5e1f, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch) {
            let grads = {
                let mut g = Graph::with_params(&model.params).train_only(|_, n| n.starts_with(&srm_prefix));
                let x = g.input(rows(inputs, idx)?)?;
                let y = g.input(rows(targets, idx)?)?;
                let r = srm.forward(&mut g, x)?;
                let loss = srm_loss(&mut g, r, y)?;
                let l = finite(g.value(loss).item() as f64, "SRM loss", epoch)?;
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
    if model.params.digest_where(|n| !n.starts_with(&srm_prefix)) != frozen {
        return Err(Error::ContractViolation("parameters outside the SRM changed during SRM training".into()));
    }
    Ok(history)
}

/// Per-item `(cos(S̃, S), cos(SRM(S̃), S))`.
pub fn srm_cosines(model: &DiffusionModel, inputs: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    if inputs.len() != targets.len() {
        return Err(Error::Data(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (chunk_in, chunk_gt) in inputs.chunks(64).zip(targets.chunks(64)) {
        let t = Tensor::new(vec![chunk_in.len(), D_S], chunk_in.concat())?;
        let r = model.refine_semantic(&t)?;
        for (i, (x, y)) in chunk_in.iter().zip(chunk_gt).enumerate() {
            out.push((cosine(x, y), cosine(r.row(i), y)));
        }
    }
    Ok(out)
}

/// Fraction of pairs whose refined cosine beats the unrefined one.
pub fn srm_win_rate(cos: &[(f64, f64)]) -> f64 {
    if cos.is_empty() {
        return 0.0;
    }
    cos.iter().filter(|(a, b)| b > a).count() as f64 / cos.len() as f64
}
