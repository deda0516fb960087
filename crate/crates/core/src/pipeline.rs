//! End-to-end decoding: voxels → BAI translation → optional semantic
//! refinement → control branches → DDIM. Every item draws its own noise from
//! `derive(run_seed, [item_index])`, so decoding a subset reproduces the
//! matching items of a full run bit for bit.

use serde::{Deserialize, Serialize};

use crate::bai::eval::{synthesize_many, translate_many};
use crate::bai::{BaiModel, RepBatch};
use crate::diffusion::{initial_noise, DiffusionModel, FusionMode, DDIM_STEPS, SITES, T_STEPS};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::representations::{Image, RepresentationTriple, IMG};
use crate::rng::derive;

pub const DEFAULT_RUN_SEED: u64 = 2024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOptions {
    pub fusion: FusionMode,
    /// Pass translated semantics through the SRM before conditioning.
    pub srm: bool,
    pub steps: usize,
    pub run_seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Direct,
            srm: false,
            steps: DDIM_STEPS,
            run_seed: DEFAULT_RUN_SEED,
        }
    }
}

impl DecodeOptions {
    /// Refined decoding: VCM fusion with SRM-refined semantics.
    pub fn refined() -> Self {
        Self {
            fusion: FusionMode::Vcm,
            srm: true,
            ..Self::default()
        }
    }
}

pub fn item_seed(run_seed: u64, index: usize) -> u64 {
    derive(run_seed, &[index as u64])
}

/// Decodes representation triples; `indices[k]` is the item index of `triples[k]`.
pub fn decode_triples(model: &DiffusionModel, triples: &[&RepresentationTriple], indices: &[usize], opts: &DecodeOptions) -> Result<Vec<Image>> {
    if triples.len() != indices.len() {
        return Err(Error::Dimension(format!("{} triples for {} indices", triples.len(), indices.len())));
    }
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let reps = RepBatch::from_triples(triples)?;
    let s = if opts.srm { model.refine_semantic(&reps.s)? } else { reps.s.clone() };
    let cond = model.cond_features(&reps)?;
    let seeds: Vec<u64> = indices.iter().map(|&i| item_seed(opts.run_seed, i)).collect();
    model.ddim_many(&s, &cond, model.fusion(opts.fusion)?, opts.steps, &seeds)
}

/// Full decode of one subject's voxel vectors.
pub fn decode_voxels(
    bai: &BaiModel,
    model: &DiffusionModel,
    voxels: &[Vec<f32>],
    subject: u32,
    indices: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<Image>> {
    let reps = translate_many(bai, voxels, subject)?;
    let refs: Vec<&RepresentationTriple> = reps.iter().collect();
    decode_triples(model, &refs, indices, opts)
}

/// Gate maps of one item at the first (noisiest) sampler step, one per site.
pub fn alpha_maps_for(model: &DiffusionModel, triple: &RepresentationTriple, index: usize, opts: &DecodeOptions) -> Result<Vec<AlphaMap>> {
    let reps = RepBatch::from_triples(&[triple])?;
    let s = if opts.srm { model.refine_semantic(&reps.s)? } else { reps.s.clone() };
    let cond = model.cond_features(&reps)?;
    let t = *model.schedule.ddim_timesteps(opts.steps)?.last().unwrap_or(&(T_STEPS - 1));
    let x = Tensor::new(vec![1, 3, IMG, IMG], initial_noise(item_seed(opts.run_seed, index)))?;
    let maps = model.alpha_maps(&x, &[t], &s, &cond)?;
    debug_assert_eq!(maps.len(), SITES);
    Ok(maps
        .into_iter()
        .enumerate()
        .map(|(site, (e, c))| AlphaMap {
            site,
            height: e.shape()[2],
            width: e.shape()[3],
            edge: e.data().to_vec(),
            color: c.data().to_vec(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMap {
    pub site: usize,
    pub height: usize,
    pub width: usize,
    pub edge: Vec<f32>,
    pub color: Vec<f32>,
}

/// fMRI synthesized from ground-truth triples, then decoded back to representations.
pub struct SynthRoundTrip {
    pub voxels: Vec<Vec<f32>>,
    pub reps: Vec<RepresentationTriple>,
}

pub fn synthesize_and_redecode(bai: &BaiModel, triples: &[&RepresentationTriple], subject: u32) -> Result<SynthRoundTrip> {
    let voxels = synthesize_many(bai, triples, subject)?;
    let reps = translate_many(bai, &voxels, subject)?;
    Ok(SynthRoundTrip { voxels, reps })
}

/// [`decode_triples`] split over up to `threads` workers. Per-item seeds make
/// the result independent of the split.
pub fn decode_triples_threaded(
    model: &DiffusionModel,
    triples: &[&RepresentationTriple],
    indices: &[usize],
    opts: &DecodeOptions,
    threads: usize,
) -> Result<Vec<Image>> {
    if threads <= 1 || triples.len() < 2 {
        return decode_triples(model, triples, indices, opts);
    }
    if triples.len() != indices.len() {
        return Err(Error::Dimension(format!("{} triples for {} indices", triples.len(), indices.len())));
    }
    let per = triples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Image>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = triples
            .chunks(per)
            .zip(indices.chunks(per))
            .map(|(t, i)| sc.spawn(move || decode_triples(model, t, i, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(triples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
