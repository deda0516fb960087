use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bai::eval::reconstruct_many;
use crate::bai::BaiModel;
use crate::container::{Table, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::representations::{Codebook, Image, RepresentationTriple, D_S, IMG};
use crate::rng::{derive, rng_at};
use crate::subject_sim::{Sample, PAIR_ID_BASE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsManifest {
    pub world_seed: u64,
    pub codebook_seed: u64,
    pub seed: u64,
    /// Index of the first item within the seeded sequence.
    #[serde(default)]
    pub first: usize,
    pub n: usize,
}

/// Images with ground-truth and reconstructed ("imprecise") representations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImprecisePairSet {
    pub manifest: PairsManifest,
    pub image_ids: Vec<u64>,
    pub images: Vec<Image>,
    pub imprecise: Vec<RepresentationTriple>,
    pub gt: Vec<RepresentationTriple>,
}

/// Image id of pair `i`; always at or above [`PAIR_ID_BASE`], so disjoint from train and test ids.
pub fn pair_image_id(seed: u64, i: usize) -> u64 {
    PAIR_ID_BASE + (derive(seed, &[0x9a1f, i as u64]) >> 24)
}

impl ImprecisePairSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Fresh simulator images whose triples pass through `reconstruct`.
    pub fn generate_with(
        world_seed: u64,
        codebook_seed: u64,
        n: usize,
        seed: u64,
        mut reconstruct: impl FnMut(&[&RepresentationTriple]) -> Result<Vec<RepresentationTriple>>,
    ) -> Result<Self> {
        let codebook = Codebook::new(codebook_seed);
        let samples: Vec<Sample> = (0..n).map(|i| Sample::generate(world_seed, &codebook, pair_image_id(seed, i))).collect();
        let gt_refs: Vec<&RepresentationTriple> = samples.iter().map(|s| &s.triple).collect();
        let imprecise = reconstruct(&gt_refs)?;
        if imprecise.len() != n {
            return Err(Error::Data(format!("reconstruction returned {} of {n} triples", imprecise.len())));
        }
        for t in &imprecise {
            t.validate()?;
        }
        Ok(Self {
            manifest: PairsManifest {
                world_seed,
                codebook_seed,
                seed,
                first: 0,
                n,
            },
            image_ids: samples.iter().map(|s| s.image_id).collect(),
            gt: samples.iter().map(|s| s.triple.clone()).collect(),
            images: samples.into_iter().map(|s| s.image).collect(),
            imprecise,
        })
    }

    /// Pairs whose imprecise side is the BAI representation round trip.
    pub fn generate(bai: &BaiModel, world_seed: u64, codebook_seed: u64, n: usize, seed: u64) -> Result<Self> {
        Self::generate_with(world_seed, codebook_seed, n, seed, |ts| reconstruct_many(bai, ts))
    }

    /// Items `[start, start + len)` as their own set.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Data(format!("pair slice {start}+{len} beyond {}", self.len())));
        }
        let r = start..start + len;
        let mut manifest = self.manifest.clone();
        manifest.first += start;
        manifest.n = len;
        Ok(Self {
            manifest,
            image_ids: self.image_ids[r.clone()].to_vec(),
            images: self.images[r.clone()].to_vec(),
            imprecise: self.imprecise[r.clone()].to_vec(),
            gt: self.gt[r].to_vec(),
        })
    }

    pub fn to_table(&self) -> Result<Table> {
        let n = self.len();
        let mut t = Table::new();
        t.put_json("pairs/manifest", &self.manifest)?;
        t.put_f32("pairs/images", &[n, 3, IMG, IMG], self.images.iter().flat_map(|i| i.data.iter().copied()).collect())?;
        for (tag, set) in [("gt", &self.gt), ("imprecise", &self.imprecise)] {
            t.put_f32(format!("pairs/{tag}/s"), &[n, D_S], set.iter().flat_map(|r| r.s.iter().copied()).collect())?;
            t.put_f32(format!("pairs/{tag}/e"), &[n, IMG * IMG], set.iter().flat_map(|r| r.e.iter().copied()).collect())?;
            t.put_f32(format!("pairs/{tag}/c"), &[n, 3 * IMG * IMG], set.iter().flat_map(|r| r.c.iter().copied()).collect())?;
        }
        Ok(t)
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let manifest: PairsManifest = t.json("pairs/manifest")?;
        let n = manifest.n;
        let image_ids = (0..n).map(|i| pair_image_id(manifest.seed, manifest.first + i)).collect();
        let (shape, data) = t.f32("pairs/images")?;
        if shape != [n, 3, IMG, IMG] {
            return Err(Error::Format(format!("pair images have shape {shape:?}")));
        }
        let images = data
            .chunks_exact(3 * IMG * IMG)
            .map(|c| Image::new(3, IMG, IMG, c.to_vec()))
            .collect::<Result<_>>()?;
        let triples = |tag: &str| -> Result<Vec<RepresentationTriple>> {
            let (_, s) = t.f32(&format!("pairs/{tag}/s"))?;
            let (_, e) = t.f32(&format!("pairs/{tag}/e"))?;
            let (_, c) = t.f32(&format!("pairs/{tag}/c"))?;
            if s.len() != n * D_S || e.len() != n * IMG * IMG || c.len() != n * 3 * IMG * IMG {
                return Err(Error::Format(format!("pair triples ({tag}) do not hold {n} items")));
            }
            Ok((0..n)
                .map(|i| RepresentationTriple {
                    s: s[i * D_S..(i + 1) * D_S].to_vec(),
                    e: e[i * IMG * IMG..(i + 1) * IMG * IMG].to_vec(),
                    c: c[i * 3 * IMG * IMG..(i + 1) * 3 * IMG * IMG].to_vec(),
                })
                .collect())
        };
        Ok(Self {
            image_ids,
            images,
            imprecise: triples("imprecise")?,
            gt: triples("gt")?,
            manifest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table()?.save(path, DATASET_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&Table::load(path, DATASET_MAGIC)?)
    }
}

/// `normalize(s + σ·z)` with seeded standard-normal `z`.
pub fn corrupt_semantic(s: &[f32], sigma: f64, seed: u64, index: u64) -> Vec<f32> {
    let mut r = rng_at(seed, &[0xc0a2, index]);
    let v: Vec<f64> = s
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut r);
            x as f64 + sigma * z
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n) as f32).collect()
}
