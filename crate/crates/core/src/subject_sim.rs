//! Ground-truth multi-subject encoding model.
//!
//! Voxels of subject `k` for a stimulus with representation features `f` are
//! `A_k · tanh(W · f) + b_k + σ·ε`, then adaptive-max-pooled to [`D_V`].
//! `W` is shared by the whole cohort, so a subject-invariant code exists and
//! subjects differ only by a linear mixing, an offset and their ROI size.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Table, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::representations::{
    block_means, extract_triple, generate_stimulus, Codebook, Image, RepresentationTriple, BLOCK, D_S, IMG,
};
use crate::rng::{derive, rng, rng_at};

pub const D_V: usize = 512;
pub const D_F: usize = D_S + 64 + 48;
pub const HIDDEN: usize = 128;
pub const ROI_MIN: usize = 600;
pub const ROI_MAX: usize = 900;
pub const DEFAULT_NOISE: f64 = 0.05;
pub const BIAS_STD: f64 = 0.5;

/// Base of training image ids; test ids are `0..n_test`.
pub const TRAIN_ID_BASE: u64 = 1 << 20;
/// Base of image ids reserved for pseudo-imprecise pair generation.
pub const PAIR_ID_BASE: u64 = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectProfile {
    pub subject_id: u32,
    pub raw_roi_size: usize,
    /// Row-major `raw_roi_size × HIDDEN`.
    pub mixing: Vec<f32>,
    pub bias: Vec<f32>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Cohort-wide nonlinear projection `HIDDEN × D_F`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCore {
    pub weights: Vec<f32>,
}

impl SharedCore {
    pub fn new(world_seed: u64) -> Self {
        let mut r = rng_at(world_seed, &[0xc0de]);
        let scale = 1.0 / (D_F as f64).sqrt();
        let weights = (0..HIDDEN * D_F)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                (z * scale) as f32
            })
            .collect();
        Self { weights }
    }
}

pub fn make_subject(subject_id: u32, seed: u64) -> SubjectProfile {
    let mut r = rng(seed);
    let raw_roi_size = r.random_range(ROI_MIN..=ROI_MAX);
    let scale = 1.0 / (HIDDEN as f64).sqrt();
    let mixing = (0..raw_roi_size * HIDDEN)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            (z * scale) as f32
        })
        .collect();
    let normal = Normal::new(0.0, BIAS_STD).expect("valid std");
    let bias = (0..raw_roi_size).map(|_| normal.sample(&mut r) as f32).collect();
    SubjectProfile {
        subject_id,
        raw_roi_size,
        mixing,
        bias,
        noise_sigma: DEFAULT_NOISE,
        seed,
    }
}

/// Seed of subject `id` in the cohort of `world_seed`.
pub fn subject_seed(world_seed: u64, id: u32) -> u64 {
    derive(world_seed, &[0x5b, id as u64])
}

/// `[S ‖ avgpool4(E) ‖ blockmeans8(C)]`.
pub fn feature_vector(t: &RepresentationTriple) -> Vec<f64> {
    let mut f = Vec::with_capacity(D_F);
    f.extend(t.s.iter().map(|&v| v as f64));
    let k = 4;
    let n = IMG / k;
    for by in 0..n {
        for bx in 0..n {
            let mut acc = 0.0;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    acc += t.e[y * IMG + x] as f64;
                }
            }
            f.push(acc / (k * k) as f64);
        }
    }
    let c = Image::new(3, IMG, IMG, t.c.clone()).expect("triple validated");
    f.extend(block_means(&c, BLOCK).expect("BLOCK divides IMG"));
    f
}

/// Raw ROI response for one trial; `trial_seed` drives the noise.
pub fn encode_to_voxels(p: &SubjectProfile, core: &SharedCore, t: &RepresentationTriple, trial_seed: u64) -> Result<Vec<f32>> {
    t.validate()?;
    let f = feature_vector(t);
    let h: Vec<f64> = core
        .weights
        .chunks_exact(D_F)
        .map(|row| row.iter().zip(&f).map(|(&w, &x)| w as f64 * x).sum::<f64>().tanh())
        .collect();
    let mut r = rng(trial_seed);
    let out = p
        .mixing
        .chunks_exact(HIDDEN)
        .zip(&p.bias)
        .map(|(row, &b)| {
            let s: f64 = row.iter().zip(&h).map(|(&a, &x)| a as f64 * x).sum();
            let eps: f64 = if p.noise_sigma > 0.0 { StandardNormal.sample(&mut r) } else { 0.0 };
            (s + b as f64 + p.noise_sigma * eps) as f32
        })
        .collect();
    Ok(out)
}

/// Window `i` covers `floor(i·n/d) .. floor((i+1)·n/d) − 1`; the last window ends at `n − 1`.
pub fn adaptive_max_pool(raw: &[f32], target: usize) -> Result<Vec<f32>> {
    let n = raw.len();
    if target == 0 || n < target {
        return Err(Error::Parameter(format!("cannot pool {n} values to {target}")));
    }
    Ok((0..target)
        .map(|i| {
            let lo = i * n / target;
            let hi = if i + 1 == target { n } else { (i + 1) * n / target };
            raw[lo..hi].iter().copied().fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub world_seed: u64,
    pub codebook_seed: u64,
    pub subjects: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world_seed: 20240611,
            codebook_seed: 7,
            subjects: vec![1, 2, 3],
            n_train: 2000,
            n_test: 200,
            noise_sigma: DEFAULT_NOISE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub class_label: usize,
    pub image: Image,
    pub triple: RepresentationTriple,
}

impl Sample {
    pub fn generate(world_seed: u64, codebook: &Codebook, image_id: u64) -> Self {
        let stim = generate_stimulus(world_seed, image_id);
        let triple = extract_triple(&stim, codebook);
        Self {
            image_id,
            class_label: stim.class_label,
            image: stim.image,
            triple,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelRecord {
    pub subject_id: u32,
    pub voxels: Vec<f32>,
}

/// One subject's training split: samples with aligned voxel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSplit {
    pub samples: Vec<Sample>,
    pub voxels: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub test: Vec<Sample>,
    /// Per subject, voxels aligned with `test`.
    pub test_voxels: BTreeMap<u32, Vec<Vec<f32>>>,
    pub train: BTreeMap<u32, SubjectSplit>,
}

/// Largest subject id representable in the image-id scheme.
pub const MAX_SUBJECT_ID: u32 = 191;

pub fn train_image_id(subject_id: u32, index: usize) -> u64 {
    TRAIN_ID_BASE + ((subject_id as u64) << 14) + index as u64
}

/// Pooled voxels of `profile` for a sample.
pub fn voxels_for(world_seed: u64, profile: &SubjectProfile, core: &SharedCore, s: &Sample) -> Result<Vec<f32>> {
    let trial = derive(world_seed, &[0x7a1, profile.subject_id as u64, s.image_id]);
    let raw = encode_to_voxels(profile, core, &s.triple, trial)?;
    adaptive_max_pool(&raw, D_V)
}

pub struct Cohort {
    pub core: SharedCore,
    pub profiles: BTreeMap<u32, SubjectProfile>,
}

impl Cohort {
    pub fn new(world_seed: u64, subjects: &[u32], noise_sigma: f64) -> Self {
        let profiles = subjects
            .iter()
            .map(|&id| {
                let mut p = make_subject(id, subject_seed(world_seed, id));
                p.noise_sigma = noise_sigma;
                (id, p)
            })
            .collect();
        Self {
            core: SharedCore::new(world_seed),
            profiles,
        }
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.subjects.is_empty() {
        return Err(Error::Config("dataset needs at least one subject".into()));
    }
    if cfg.n_train >= 1 << 14 || cfg.n_test as u64 >= TRAIN_ID_BASE {
        return Err(Error::Config("dataset split too large for the id scheme".into()));
    }
    if cfg.subjects.iter().any(|&s| s > MAX_SUBJECT_ID) {
        return Err(Error::Config(format!("subject ids must be <= {MAX_SUBJECT_ID}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    if !cfg.subjects.iter().all(|s| seen.insert(*s)) {
        return Err(Error::Config("duplicate subject id".into()));
    }
    let codebook = Codebook::new(cfg.codebook_seed);
    let cohort = Cohort::new(cfg.world_seed, &cfg.subjects, cfg.noise_sigma);
    let test: Vec<Sample> = (0..cfg.n_test as u64)
        .map(|i| Sample::generate(cfg.world_seed, &codebook, i))
        .collect();
    let mut test_voxels = BTreeMap::new();
    let mut train = BTreeMap::new();
    for (&sid, p) in &cohort.profiles {
        let tv = test
            .iter()
            .map(|s| voxels_for(cfg.world_seed, p, &cohort.core, s))
            .collect::<Result<Vec<_>>>()?;
        test_voxels.insert(sid, tv);
        let samples: Vec<Sample> = (0..cfg.n_train)
            .map(|i| Sample::generate(cfg.world_seed, &codebook, train_image_id(sid, i)))
            .collect();
        let voxels = samples
            .iter()
            .map(|s| voxels_for(cfg.world_seed, p, &cohort.core, s))
            .collect::<Result<Vec<_>>>()?;
        train.insert(sid, SubjectSplit { samples, voxels });
    }
    Ok(Dataset {
        config: cfg.clone(),
        test,
        test_voxels,
        train,
    })
}

fn put_samples(t: &mut Table, prefix: &str, samples: &[Sample]) -> Result<()> {
    let n = samples.len();
    let cat = |f: &dyn Fn(&Sample) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f32>>();
    t.put_f32(format!("{prefix}/ids"), &[n], samples.iter().map(|s| s.image_id as f32).collect())?;
    t.put_f32(format!("{prefix}/labels"), &[n], samples.iter().map(|s| s.class_label as f32).collect())?;
    t.put_f32(format!("{prefix}/images"), &[n, 3, IMG, IMG], cat(&|s| &s.image.data))?;
    t.put_f32(format!("{prefix}/s"), &[n, D_S], cat(&|s| &s.triple.s))?;
    t.put_f32(format!("{prefix}/e"), &[n, IMG, IMG], cat(&|s| &s.triple.e))?;
    t.put_f32(format!("{prefix}/c"), &[n, 3, IMG, IMG], cat(&|s| &s.triple.c))?;
    Ok(())
}

fn get_samples(t: &Table, prefix: &str) -> Result<Vec<Sample>> {
    let (shape, ids) = t.f32(&format!("{prefix}/ids"))?;
    let n = shape[0];
    let (_, labels) = t.f32(&format!("{prefix}/labels"))?;
    let (_, images) = t.f32(&format!("{prefix}/images"))?;
    let (_, s) = t.f32(&format!("{prefix}/s"))?;
    let (_, e) = t.f32(&format!("{prefix}/e"))?;
    let (_, c) = t.f32(&format!("{prefix}/c"))?;
    let px = 3 * IMG * IMG;
    let ex = IMG * IMG;
    if labels.len() != n || images.len() != n * px || s.len() != n * D_S || e.len() != n * ex || c.len() != n * px {
        return Err(Error::Format(format!("{prefix}: inconsistent sample tables")));
    }
    (0..n)
        .map(|i| {
            Ok(Sample {
                image_id: ids[i] as u64,
                class_label: labels[i] as usize,
                image: Image::new(3, IMG, IMG, images[i * px..(i + 1) * px].to_vec())?,
                triple: RepresentationTriple {
                    s: s[i * D_S..(i + 1) * D_S].to_vec(),
                    e: e[i * ex..(i + 1) * ex].to_vec(),
                    c: c[i * px..(i + 1) * px].to_vec(),
                },
            })
        })
        .collect()
}

fn put_voxels(t: &mut Table, name: String, v: &[Vec<f32>]) -> Result<()> {
    t.put_f32(name, &[v.len(), D_V], v.iter().flatten().copied().collect())
}

fn get_voxels(t: &Table, name: &str) -> Result<Vec<Vec<f32>>> {
    let (shape, data) = t.f32(name)?;
    if shape.len() != 2 || shape[1] != D_V {
        return Err(Error::Format(format!("{name}: voxel table shape {shape:?}")));
    }
    Ok(data.chunks_exact(D_V).map(|c| c.to_vec()).collect())
}

impl Dataset {
    pub fn subjects(&self) -> Vec<u32> {
        self.train.keys().copied().collect()
    }

    pub fn to_table(&self) -> Result<Table> {
        let mut t = Table::new();
        t.put_json("config", &self.config)?;
        let subs: Vec<f32> = self.subjects().iter().map(|&s| s as f32).collect();
        t.put_f32("subjects", &[subs.len()], subs)?;
        put_samples(&mut t, "test", &self.test)?;
        for (sid, v) in &self.test_voxels {
            if !self.test.is_empty() {
                put_voxels(&mut t, format!("test/voxels/{sid}"), v)?;
            }
        }
        for (sid, split) in &self.train {
            if !split.samples.is_empty() {
                put_samples(&mut t, &format!("train/{sid}"), &split.samples)?;
                put_voxels(&mut t, format!("train/{sid}/voxels"), &split.voxels)?;
            }
        }
        Ok(t)
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let config: DatasetConfig = t.json("config")?;
        let (_, subs) = t.f32("subjects")?;
        let test = if t.contains("test/ids") { get_samples(t, "test")? } else { Vec::new() };
        let mut test_voxels = BTreeMap::new();
        let mut train = BTreeMap::new();
        for &s in subs {
            let sid = s as u32;
            let tv = if test.is_empty() { Vec::new() } else { get_voxels(t, &format!("test/voxels/{sid}"))? };
            test_voxels.insert(sid, tv);
            let split = if t.contains(&format!("train/{sid}/ids")) {
                SubjectSplit {
                    samples: get_samples(t, &format!("train/{sid}"))?,
                    voxels: get_voxels(t, &format!("train/{sid}/voxels"))?,
                }
            } else {
                SubjectSplit { samples: Vec::new(), voxels: Vec::new() }
            };
            train.insert(sid, split);
        }
        Ok(Self { config, test, test_voxels, train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table()?.save(path, DATASET_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&Table::load(path, DATASET_MAGIC)?)
    }

    /// The first `n` training samples of one subject, as a single-subject dataset without test items.
    pub fn subset(&self, subject: u32, n: usize) -> Result<Dataset> {
        let split = self.train.get(&subject).ok_or(Error::MissingSubject(subject))?;
        if n > split.samples.len() {
            return Err(Error::Data(format!("subject {subject} has only {} samples", split.samples.len())));
        }
        let mut config = self.config.clone();
        config.subjects = vec![subject];
        config.n_train = n;
        let mut train = BTreeMap::new();
        train.insert(
            subject,
            SubjectSplit {
                samples: split.samples[..n].to_vec(),
                voxels: split.voxels[..n].to_vec(),
            },
        );
        let mut test_voxels = BTreeMap::new();
        test_voxels.insert(subject, self.test_voxels.get(&subject).cloned().unwrap_or_default());
        Ok(Dataset {
            config,
            test: self.test.clone(),
            test_voxels,
            train,
        })
    }
}
