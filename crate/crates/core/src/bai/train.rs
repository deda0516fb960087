use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_total, CycleReduction, Lambdas};
use super::model::{voxel_tensor, BaiModel, RepBatch, Variant};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Graph, ParamId};
use crate::rng::rng_at;
use crate::subject_sim::{Dataset, SubjectSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambdas: Lambdas,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// The cycle weight ramps linearly to `lambdas.cyc` over this many epochs (0 = constant).
    #[serde(default)]
    pub cycle_warmup_epochs: usize,
    #[serde(default)]
    pub cycle_reduction: CycleReduction,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 64,
            epochs: 60,
            seed: 1,
            variant: Variant::Full,
            cycle_warmup_epochs: 0,
            cycle_reduction: CycleReduction::Mean,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Loss weights in effect during `epoch`.
    pub fn lambdas_at(&self, epoch: usize) -> Lambdas {
        let mut l = self.lambdas;
        if self.cycle_warmup_epochs > 0 && epoch < self.cycle_warmup_epochs {
            l.cyc *= (epoch + 1) as f64 / (self.cycle_warmup_epochs + 1) as f64;
        }
        l
    }
}

/// Mean loss per epoch, total and per term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub total: Vec<f64>,
    pub terms: BTreeMap<String, Vec<f64>>,
}

impl LossHistory {
    pub fn first(&self, term: &str) -> Option<f64> {
        self.terms.get(term).and_then(|v| v.first().copied())
    }

    pub fn last(&self, term: &str) -> Option<f64> {
        self.terms.get(term).and_then(|v| v.last().copied())
    }
}

/// One single-subject minibatch.
pub struct Batch {
    pub subject: u32,
    pub voxels: crate::nn::Tensor<f32>,
    pub reps: RepBatch,
}

impl Batch {
    pub fn from_split(subject: u32, split: &SubjectSplit, idx: &[usize]) -> Result<Self> {
        let v: Vec<&[f32]> = idx.iter().map(|&i| split.voxels[i].as_slice()).collect();
        let t: Vec<_> = idx.iter().map(|&i| &split.samples[i].triple).collect();
        Ok(Self {
            subject,
            voxels: voxel_tensor(&v)?,
            reps: RepBatch::from_triples(&t)?,
        })
    }
}

/// Seeded epoch plan: shuffle within each subject, cut into batches, shuffle batch order.
pub fn epoch_plan(data: &BTreeMap<u32, SubjectSplit>, batch: usize, seed: u64, epoch: usize) -> Vec<(u32, Vec<usize>)> {
    let mut plan = Vec::new();
    for (&sid, split) in data {
        let mut idx: Vec<usize> = (0..split.samples.len()).collect();
        idx.shuffle(&mut rng_at(seed, &[0xe90c, epoch as u64, sid as u64]));
        for chunk in idx.chunks(batch) {
            plan.push((sid, chunk.to_vec()));
        }
    }
    plan.shuffle(&mut rng_at(seed, &[0xba7c, epoch as u64]));
    plan
}

/// Runs the optimization loop on `model`, training only parameters accepted by `trainable`.
pub fn fit(
    model: &mut BaiModel,
    data: &BTreeMap<u32, SubjectSplit>,
    cfg: &TrainingConfig,
    trainable: &dyn Fn(ParamId, &str) -> bool,
    mut on_epoch: impl FnMut(usize, &LossHistory),
) -> Result<LossHistory> {
    cfg.validate()?;
    for &sid in data.keys() {
        if !model.arch.has_subject(sid) {
            return Err(Error::MissingSubject(sid));
        }
    }
    let mut opt = AdamW::new(cfg.lr as f32).with_weight_decay(cfg.weight_decay as f32);
    let mut hist = LossHistory::default();
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(data, cfg.batch, cfg.seed, epoch);
        let lambdas = cfg.lambdas_at(epoch);
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut total = 0.0;
        let mut count = 0usize;
        for (sid, idx) in plan {
            let b = Batch::from_split(sid, &data[&sid], &idx)?;
            let grads = {
                let mut g = Graph::with_params(&model.params).train_only(trainable);
                let v = g.input(b.voxels.clone())?;
                let r = b.reps.input(&mut g)?;
                let lg = loss_total(&model.arch, &mut g, v, r, sid, &lambdas, cfg.cycle_reduction)?;
                let n = idx.len();
                for (name, var) in &lg.terms {
                    *sums.entry(name).or_default() += g.value(*var).item() as f64 * n as f64;
                }
                total += g.value(lg.total).item() as f64 * n as f64;
                count += n;
                g.backward(lg.total)?
            };
            opt.step(&mut model.params, &grads)?;
        }
        hist.total.push(total / count as f64);
        for (k, v) in sums {
            hist.terms.entry(k.to_string()).or_default().push(v / count as f64);
        }
        on_epoch(epoch, &hist);
    }
    Ok(hist)
}

/// One model, or one per subject for the subject-specific variant.
#[derive(Clone, Debug)]
pub struct BaiBundle {
    pub variant: Variant,
    pub models: Vec<BaiModel>,
}

impl BaiBundle {
    pub fn model_for(&self, subject: u32) -> Result<&BaiModel> {
        self.models
            .iter()
            .find(|m| m.arch.has_subject(subject))
            .ok_or(Error::MissingSubject(subject))
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.models.iter().flat_map(|m| m.subjects()).collect();
        s.sort_unstable();
        s
    }
}

pub struct TrainOutcome {
    pub bundle: BaiBundle,
    /// One history per trained model.
    pub histories: Vec<LossHistory>,
}

pub fn train_bai(data: &Dataset, cfg: &TrainingConfig, mut on_epoch: impl FnMut(usize, usize, &LossHistory)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let subjects = data.subjects();
    if subjects.is_empty() {
        return Err(Error::Data("dataset has no subjects".into()));
    }
    let all = |_: ParamId, _: &str| true;
    match cfg.variant {
        Variant::SubjectSpecific => {
            let mut models = Vec::new();
            let mut histories = Vec::new();
            for (k, &sid) in subjects.iter().enumerate() {
                let mut m = BaiModel::new(Variant::SubjectSpecific, &[sid], cfg.seed)?;
                let mut only = BTreeMap::new();
                only.insert(sid, data.train[&sid].clone());
                let h = fit(&mut m, &only, cfg, &all, |e, h| on_epoch(k, e, h))?;
                models.push(m);
                histories.push(h);
            }
            Ok(TrainOutcome {
                bundle: BaiBundle { variant: cfg.variant, models },
                histories,
            })
        }
        v => {
            let mut m = BaiModel::new(v, &subjects, cfg.seed)?;
            let h = fit(&mut m, &data.train, cfg, &all, |e, h| on_epoch(0, e, h))?;
            Ok(TrainOutcome {
                bundle: BaiBundle { variant: v, models: vec![m] },
                histories: vec![h],
            })
        }
    }
}
