use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::Lambdas;
use super::model::{BaiArch, BaiModel, Variant, D_LAT};
use super::train::{BaiBundle, TrainingConfig};
use crate::container::{Table, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::subject_sim::D_V;

pub const BAI_PREFIX: &str = "bai/";
pub const BAI_MANIFEST: &str = "bai/manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub subjects: Vec<u32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaiManifest {
    pub variant: Variant,
    pub d_v: usize,
    pub d_lat: usize,
    pub lambdas: Lambdas,
    pub training: Option<TrainingConfig>,
    pub models: Vec<ModelEntry>,
}

fn model_prefix(k: usize) -> String {
    format!("{BAI_PREFIX}{k}/")
}

impl BaiBundle {
    pub fn manifest(&self, training: Option<&TrainingConfig>) -> BaiManifest {
        BaiManifest {
            variant: self.variant,
            d_v: D_V,
            d_lat: D_LAT,
            lambdas: training.map(|t| t.lambdas).unwrap_or_default(),
            training: training.cloned(),
            models: self
                .models
                .iter()
                .map(|m| ModelEntry {
                    subjects: m.subjects(),
                    seed: m.seed,
                })
                .collect(),
        }
    }

    /// Appends the manifest and every model's parameters to `t`.
    pub fn write_into(&self, t: &mut Table, training: Option<&TrainingConfig>) -> Result<()> {
        t.put_json(BAI_MANIFEST, &self.manifest(training))?;
        for (k, m) in self.models.iter().enumerate() {
            t.put_params(&model_prefix(k), &m.params)?;
        }
        Ok(())
    }

    pub fn read_from(t: &Table) -> Result<(Self, BaiManifest)> {
        let man: BaiManifest = t.json(BAI_MANIFEST)?;
        if man.d_v != D_V || man.d_lat != D_LAT {
            return Err(Error::Format(format!(
                "checkpoint dims d_v={} d_lat={} do not match this build ({D_V}, {D_LAT})",
                man.d_v, man.d_lat
            )));
        }
        let mut models = Vec::with_capacity(man.models.len());
        for (k, e) in man.models.iter().enumerate() {
            let (arch, mut params) = BaiArch::build(man.variant, &e.subjects, e.seed)?;
            t.load_params(&model_prefix(k), &mut params)?;
            models.push(BaiModel { arch, params, seed: e.seed });
        }
        Ok((
            Self {
                variant: man.variant,
                models,
            },
            man,
        ))
    }

    pub fn save(&self, path: &Path, training: Option<&TrainingConfig>) -> Result<()> {
        let mut t = Table::new();
        self.write_into(&mut t, training)?;
        t.save(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<(Self, BaiManifest)> {
        Self::read_from(&Table::load(path, CHECKPOINT_MAGIC)?)
    }
}
