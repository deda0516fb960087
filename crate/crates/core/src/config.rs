//! Whole-run configuration. Defaults are the reference configuration; every
//! field can be overridden by a dotted `path=value` pair, and unknown keys are
//! rejected both in files and in overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bai::{TrainingConfig, Variant};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::pipeline::DecodeOptions;
use crate::refinement::RefineConfig;
use crate::subject_sim::DatasetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self { n: 1000, seed: 31 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub samples: usize,
    pub training: TrainingConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            training: TrainingConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                batch: 10,
                epochs: 40,
                seed: 41,
                ..TrainingConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub bai: TrainingConfig,
    pub diffusion: DiffusionConfig,
    pub pairs: PairsConfig,
    pub refine: RefineConfig,
    pub decode: DecodeOptions,
    pub adapt: AdaptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            bai: reference_bai(Variant::Full),
            diffusion: DiffusionConfig {
                epochs: 6,
                max_images: 2000,
                ..DiffusionConfig::default()
            },
            pairs: PairsConfig::default(),
            refine: RefineConfig::default(),
            decode: DecodeOptions::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

/// BAI training settings of the reference run.
pub fn reference_bai(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        lr: 1e-3,
        epochs: 20,
        variant,
        ..TrainingConfig::default()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `a.b.c=value` overrides; `value` is parsed as JSON, falling back to a string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override {key}: {p} is not inside an object")))?;
                if !obj.contains_key(*p) {
                    return Err(Error::Config(format!("override {key}: unknown field {p}")));
                }
                if i + 1 == parts.len() {
                    obj.insert(p.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*p).expect("checked above");
            }
        }
        let out: Self = serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.bai.validate()?;
        self.diffusion.validate()?;
        self.refine.validate()?;
        self.adapt.training.validate()?;
        if self.decode.steps == 0 {
            return Err(Error::Config("decode.steps must be >= 1".into()));
        }
        if self.pairs.n == 0 || self.adapt.samples == 0 {
            return Err(Error::Config("pairs.n and adapt.samples must be >= 1".into()));
        }
        Ok(())
    }
}
