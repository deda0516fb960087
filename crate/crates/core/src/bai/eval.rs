use serde::{Deserialize, Serialize};

use super::model::{voxel_tensor, BaiModel, RepBatch};
use super::train::BaiBundle;
use crate::error::{Error, Result};
use crate::metrics::{pearson_f32, per_item_two_way};
use crate::nn::Tensor;
use crate::representations::RepresentationTriple;
use crate::subject_sim::Dataset;

const CHUNK: usize = 64;

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `translate_v2r` over arbitrarily many voxel vectors, in fixed-size chunks.
pub fn translate_many(model: &BaiModel, voxels: &[Vec<f32>], subject: u32) -> Result<Vec<RepresentationTriple>> {
    let mut out = Vec::with_capacity(voxels.len());
    for chunk in voxels.chunks(CHUNK) {
        let refs: Vec<&[f32]> = chunk.iter().map(|v| v.as_slice()).collect();
        out.extend(model.translate_v2r(&voxel_tensor(&refs)?, subject)?.triples());
    }
    Ok(out)
}

/// `translate_r2v` over many triples.
pub fn synthesize_many(model: &BaiModel, triples: &[&RepresentationTriple], subject: u32) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(triples.len());
    for chunk in triples.chunks(CHUNK) {
        let v = model.translate_r2v(&RepBatch::from_triples(chunk)?, subject)?;
        out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
    }
    Ok(out)
}

/// Representation round trip `decode_reps(encode_reps(R))` over many triples.
pub fn reconstruct_many(model: &BaiModel, triples: &[&RepresentationTriple]) -> Result<Vec<RepresentationTriple>> {
    let mut out = Vec::with_capacity(triples.len());
    for chunk in triples.chunks(CHUNK) {
        out.extend(model.reconstruct_reps(&RepBatch::from_triples(chunk)?)?.triples());
    }
    Ok(out)
}

pub fn voxel_round_trip_many(model: &BaiModel, voxels: &[Vec<f32>], subject: u32) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(voxels.len());
    for chunk in voxels.chunks(CHUNK) {
        let refs: Vec<&[f32]> = chunk.iter().map(|v| v.as_slice()).collect();
        let t: Tensor<f32> = model.reconstruct_voxels(&voxel_tensor(&refs)?, subject)?;
        out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
    }
    Ok(out)
}

/// Held-out scores of one subject's test voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject: u32,
    /// Per-item cosine(Ŝ, S).
    pub semantic_cos: Vec<f64>,
    /// Per-item edge two-way success rate; its mean is the set accuracy.
    pub edge_two_way: Vec<f64>,
    /// Per-item correlation of V̂ = translate_r2v(R) with the measured V.
    pub voxel_corr: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl SubjectScores {
    pub fn mean_cos(&self) -> f64 {
        mean(&self.semantic_cos)
    }
    pub fn edge_acc(&self) -> f64 {
        mean(&self.edge_two_way)
    }
    pub fn mean_voxel_corr(&self) -> f64 {
        mean(&self.voxel_corr)
    }
}

/// Per-item edge two-way scores with flattened edge maps as features.
pub fn edge_identification(pred: &[RepresentationTriple], gt: &[&RepresentationTriple]) -> Result<Vec<f64>> {
    let d: Vec<Vec<f64>> = pred.iter().map(|t| t.e.iter().map(|&v| v as f64).collect()).collect();
    let g: Vec<Vec<f64>> = gt.iter().map(|t| t.e.iter().map(|&v| v as f64).collect()).collect();
    per_item_two_way(&d, &g)
}

/// Scores the held-out test set of `subject` with the model that owns it.
pub fn score_subject(bundle: &BaiBundle, data: &Dataset, subject: u32) -> Result<SubjectScores> {
    let model = bundle.model_for(subject)?;
    let voxels = data.test_voxels.get(&subject).ok_or(Error::MissingSubject(subject))?;
    if voxels.len() != data.test.len() || data.test.len() < 2 {
        return Err(Error::Data(format!("subject {subject} needs at least 2 aligned test items")));
    }
    let gt: Vec<&RepresentationTriple> = data.test.iter().map(|s| &s.triple).collect();
    let pred = translate_many(model, voxels, subject)?;
    let semantic_cos = pred.iter().zip(&gt).map(|(p, g)| cosine(&p.s, &g.s)).collect();
    let edge_two_way = edge_identification(&pred, &gt)?;
    let synth = synthesize_many(model, &gt, subject)?;
    let voxel_corr = synth
        .iter()
        .zip(voxels)
        .map(|(a, b)| pearson_f32(a, b).unwrap_or(0.0))
        .collect();
    Ok(SubjectScores {
        subject,
        semantic_cos,
        edge_two_way,
        voxel_corr,
    })
}

/// Scores every subject with test voxels, in subject order.
pub fn score_all(bundle: &BaiBundle, data: &Dataset) -> Result<Vec<SubjectScores>> {
    data.test_voxels
        .keys()
        .filter(|&&s| bundle.model_for(s).is_ok())
        .map(|&s| score_subject(bundle, data, s))
        .collect()
}
