use serde::{Deserialize, Serialize};

use super::model::{sbmm_prefix, BaiArch, BaiModel, Variant};
use super::train::{fit, LossHistory, TrainingConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, Real, Tensor, Var};
use crate::subject_sim::{SubjectSplit, D_V};
use std::collections::BTreeMap;

/// Fits a fresh SBMM pair for `subject` on its first `n_samples` training items.
///
/// Every parameter outside `sbmm/{subject}/` is frozen; a digest of those
/// parameters is compared before and after, and any change is a contract violation.
pub fn adapt_new_subject(
    model: &BaiModel,
    subject: u32,
    split: &SubjectSplit,
    n_samples: usize,
    cfg: &TrainingConfig,
    on_epoch: impl FnMut(usize, &LossHistory),
) -> Result<(BaiModel, LossHistory)> {
    if model.arch.variant == Variant::NoSbmm {
        return Err(Error::Config("the no-sbmm variant has no subject modules to adapt".into()));
    }
    if model.arch.has_subject(subject) {
        return Err(Error::SubjectConflict(subject));
    }
    if n_samples == 0 || n_samples > split.samples.len() {
        return Err(Error::Data(format!(
            "requested {n_samples} adaptation samples, subject {subject} has {}",
            split.samples.len()
        )));
    }
    let mut adapted = model.clone();
    adapted.arch.counters = Default::default();
    adapted.arch.add_subject(&mut adapted.params, subject, model.seed)?;
    let before = adapted.digest_except_subject(subject);
    let prefix = sbmm_prefix(subject);
    let mut data = BTreeMap::new();
    data.insert(
        subject,
        SubjectSplit {
            samples: split.samples[..n_samples].to_vec(),
            voxels: split.voxels[..n_samples].to_vec(),
        },
    );
    let hist = fit(&mut adapted, &data, cfg, &|_: ParamId, n: &str| n.starts_with(&prefix), on_epoch)?;
    if adapted.digest_except_subject(subject) != before {
        return Err(Error::ContractViolation(format!(
            "parameters outside {prefix} changed during adaptation"
        )));
    }
    Ok((adapted, hist))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyTarget {
    Semantic,
    Edge,
    Color,
}

impl std::str::FromStr for SaliencyTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "edge" => Ok(Self::Edge),
            "color" => Ok(Self::Color),
            _ => Err(Error::Config(format!("unknown saliency target {s}"))),
        }
    }
}

/// Scalar `Σ|pred|` of the chosen translated representation.
pub fn saliency_objective<T: Real>(arch: &BaiArch, g: &mut Graph<'_, T>, v: Var, subject: u32, target: SaliencyTarget) -> Result<Var> {
    let r = arch.translate_v2r(g, v, subject)?;
    let x = match target {
        SaliencyTarget::Semantic => r.s,
        SaliencyTarget::Edge => r.e,
        SaliencyTarget::Color => r.c,
    };
    let a = g.abs(x)?;
    g.sum_all(a)
}

/// `|∂ Σ|pred| / ∂V|`, divided by its maximum (all zeros when the gradient vanishes).
pub fn voxel_saliency(model: &BaiModel, voxels: &[f32], subject: u32, target: SaliencyTarget) -> Result<Vec<f32>> {
    if voxels.len() != D_V {
        return Err(Error::Dimension(format!("expected {D_V} voxels, got {}", voxels.len())));
    }
    let mut g = Graph::with_params(&model.params).frozen();
    let v = g.input_with_grad(Tensor::new(vec![1, D_V], voxels.to_vec())?)?;
    let y = saliency_objective(&model.arch, &mut g, v, subject, target)?;
    let grads = g.backward(y)?;
    let gv = grads.of(v).ok_or_else(|| Error::Numerical("no gradient reached the voxels".into()))?;
    let abs: Vec<f32> = gv.data().iter().map(|x| x.abs()).collect();
    let max = abs.iter().cloned().fold(0.0f32, f32::max);
    if max == 0.0 {
        return Ok(abs);
    }
    Ok(abs.iter().map(|&x| x / max).collect())
}
