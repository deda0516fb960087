//! Python bindings. Configurations cross the boundary as JSON strings using the
//! same schema as the CLI config file; arrays cross as flat lists of floats.

use std::path::PathBuf;

use braid::bai::eval::{synthesize_many, translate_many};
use braid::bai::{adapt_new_subject, score_all, train_bai, voxel_saliency, BaiBundle, SaliencyTarget, TrainingConfig};
use braid::diffusion::{train_denoiser, DiffusionConfig, DiffusionModel};
use braid::metrics::{identity_features, pixcorr, ssim, two_way_identification};
use braid::pipeline::{decode_triples, DecodeOptions};
use braid::refinement::{train_refinement, ImprecisePairSet, RefineConfig};
use braid::representations::{self as reps, RepresentationTriple};
use braid::subject_sim::{build_dataset, Dataset as CoreDataset, DatasetConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

create_exception!(braid_py, BraidError, PyException);

fn err(e: braid::Error) -> PyErr {
    BraidError::new_err(e.to_string())
}

fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a possibly partial JSON config laid over the defaults; unknown keys are rejected.
fn json<T: Serialize + DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    let bad = |e: serde_json::Error| BraidError::new_err(format!("invalid config: {e}"));
    let mut v = serde_json::to_value(T::default()).map_err(bad)?;
    if let Some(t) = text {
        overlay(&mut v, serde_json::from_str(t).map_err(bad)?);
    }
    serde_json::from_value(v).map_err(bad)
}

/// An RGB image in `[0,1]`, channel-major.
#[pyclass(name = "Image", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: reps::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: reps::Image::new(channels, height, width, data).map_err(err)? })
    }
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels, self.inner.height, self.inner.width)
    }
    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }
    fn to_ppm(&self, path: PathBuf) -> PyResult<()> {
        braid::imageio::write_ppm(&path, &self.inner).map_err(err)
    }
}

/// Semantic vector, edge map and color palette of one stimulus.
#[pyclass(name = "Triple", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTriple {
    inner: RepresentationTriple,
}

#[pymethods]
impl PyTriple {
    #[new]
    fn new(s: Vec<f32>, e: Vec<f32>, c: Vec<f32>) -> Self {
        Self { inner: RepresentationTriple { s, e, c } }
    }
    #[getter]
    fn s(&self) -> Vec<f32> {
        self.inner.s.clone()
    }
    #[getter]
    fn e(&self) -> Vec<f32> {
        self.inner.e.clone()
    }
    #[getter]
    fn c(&self) -> Vec<f32> {
        self.inner.c.clone()
    }
}

fn wrap_triples(ts: Vec<RepresentationTriple>) -> Vec<PyTriple> {
    ts.into_iter().map(|inner| PyTriple { inner }).collect()
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    /// Simulates a dataset from a JSON `DatasetConfig` (reference defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(py: Python<'_>, config: Option<&str>) -> PyResult<Self> {
        let cfg: DatasetConfig = json(config)?;
        let inner = py.detach(|| build_dataset(&cfg)).map_err(err)?;
        Ok(Self { inner })
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&path).map_err(err)? })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }
    #[getter]
    fn subjects(&self) -> Vec<u32> {
        self.inner.subjects()
    }
    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }
    fn test_triple(&self, i: usize) -> PyResult<PyTriple> {
        let s = self.inner.test.get(i).ok_or_else(|| PyIndexError::new_err(i))?;
        Ok(PyTriple { inner: s.triple.clone() })
    }
    fn test_image(&self, i: usize) -> PyResult<PyImage> {
        let s = self.inner.test.get(i).ok_or_else(|| PyIndexError::new_err(i))?;
        Ok(PyImage { inner: s.image.clone() })
    }
    fn test_voxels(&self, subject: u32) -> PyResult<Vec<Vec<f32>>> {
        self.inner.test_voxels.get(&subject).cloned().ok_or_else(|| err(braid::Error::MissingSubject(subject)))
    }
}

/// A trained bidirectional autoencoder (one model, or one per subject).
#[pyclass(name = "Bai", frozen)]
struct PyBai {
    inner: BaiBundle,
}

impl PyBai {
    fn model(&self, subject: u32) -> PyResult<&braid::bai::BaiModel> {
        self.inner.model_for(subject).map_err(err)
    }
}

#[pymethods]
impl PyBai {
    /// Trains on `data` with a JSON `TrainingConfig`; returns the model and per-epoch total losses.
    #[staticmethod]
    #[pyo3(signature = (data, config=None))]
    fn train(py: Python<'_>, data: &PyDataset, config: Option<&str>) -> PyResult<(Self, Vec<f64>)> {
        let cfg: TrainingConfig = json(config)?;
        let out = py.detach(|| train_bai(&data.inner, &cfg, |_, _, _| {})).map_err(err)?;
        let totals = out.histories.first().map(|h| h.total.clone()).unwrap_or_default();
        Ok((Self { inner: out.bundle }, totals))
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: BaiBundle::load(&path).map_err(err)?.0 })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(err)
    }
    #[getter]
    fn subjects(&self) -> Vec<u32> {
        self.inner.subjects()
    }
    /// Voxels to predicted representation triples.
    fn translate(&self, voxels: Vec<Vec<f32>>, subject: u32) -> PyResult<Vec<PyTriple>> {
        Ok(wrap_triples(translate_many(self.model(subject)?, &voxels, subject).map_err(err)?))
    }
    /// Representation triples to synthetic voxels of `subject`.
    fn synthesize(&self, triples: Vec<PyRef<'_, PyTriple>>, subject: u32) -> PyResult<Vec<Vec<f32>>> {
        let ts: Vec<&RepresentationTriple> = triples.iter().map(|t| &t.inner).collect();
        synthesize_many(self.model(subject)?, &ts, subject).map_err(err)
    }
    /// Normalized voxel saliency for `target` in {"semantic", "edge", "color"}.
    fn saliency(&self, voxels: Vec<f32>, subject: u32, target: &str) -> PyResult<Vec<f32>> {
        let target: SaliencyTarget = target.parse().map_err(err)?;
        voxel_saliency(self.model(subject)?, &voxels, subject, target).map_err(err)
    }
    /// Held-out `(subject, mean cosine, edge two-way accuracy, voxel correlation)` rows.
    fn score(&self, data: &PyDataset) -> PyResult<Vec<(u32, f64, f64, f64)>> {
        let s = score_all(&self.inner, &data.inner).map_err(err)?;
        Ok(s.iter().map(|s| (s.subject, s.mean_cos(), s.edge_acc(), s.mean_voxel_corr())).collect())
    }
    /// New-subject adaptation with every shared parameter frozen.
    #[pyo3(signature = (data, subject, n_samples, config=None))]
    fn adapt(&self, py: Python<'_>, data: &PyDataset, subject: u32, n_samples: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg: TrainingConfig = json(config)?;
        let split = data.inner.train.get(&subject).ok_or_else(|| err(braid::Error::MissingSubject(subject)))?;
        let base = self.inner.models.first().ok_or_else(|| BraidError::new_err("empty model bundle"))?;
        let (m, _) = py.detach(|| adapt_new_subject(base, subject, split, n_samples, &cfg, |_, _| {})).map_err(err)?;
        let mut inner = self.inner.clone();
        inner.models[0] = m;
        Ok(Self { inner })
    }
    /// Pseudo-imprecise pairs for refinement training.
    fn imprecise_pairs(&self, data: &PyDataset, n: usize, seed: u64) -> PyResult<PyPairs> {
        let c = &data.inner.config;
        let base = self.inner.models.first().ok_or_else(|| BraidError::new_err("empty model bundle"))?;
        Ok(PyPairs { inner: ImprecisePairSet::generate(base, c.world_seed, c.codebook_seed, n, seed).map_err(err)? })
    }
}

#[pyclass(name = "ImprecisePairs", frozen)]
struct PyPairs {
    inner: ImprecisePairSet,
}

#[pymethods]
impl PyPairs {
    fn __len__(&self) -> usize {
        self.inner.len()
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ImprecisePairSet::load(&path).map_err(err)? })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }
}

/// Conditional denoiser, optionally carrying trained refinement modules.
#[pyclass(name = "Diffusion", frozen)]
struct PyDiffusion {
    inner: DiffusionModel,
}

#[pymethods]
impl PyDiffusion {
    #[staticmethod]
    #[pyo3(signature = (data, config=None))]
    fn train(py: Python<'_>, data: &PyDataset, config: Option<&str>) -> PyResult<(Self, Vec<f64>)> {
        let cfg: DiffusionConfig = json(config)?;
        let (inner, hist) = py.detach(|| train_denoiser(&data.inner, &cfg, |_, _| {})).map_err(err)?;
        Ok((Self { inner }, hist))
    }
    #[staticmethod]
    #[pyo3(signature = (path, refine=None))]
    fn load(path: PathBuf, refine: Option<PathBuf>) -> PyResult<Self> {
        let (mut inner, _) = DiffusionModel::load_diffusion(&path).map_err(err)?;
        if let Some(r) = refine {
            inner.load_refine(&r).map_err(err)?;
        }
        Ok(Self { inner })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_diffusion(&path, None, &[]).map_err(err)
    }
    #[getter]
    fn has_refinement(&self) -> bool {
        self.inner.refine.is_some()
    }
    /// Returns a copy with SRM/VCM trained on `pairs`, plus per-epoch losses.
    #[pyo3(signature = (pairs, config=None))]
    fn train_refinement(&self, py: Python<'_>, pairs: &PyPairs, config: Option<&str>) -> PyResult<(Self, Vec<f64>)> {
        let cfg: RefineConfig = json(config)?;
        let (inner, hist) = py.detach(|| train_refinement(&self.inner, &pairs.inner, &cfg, |_, _| {})).map_err(err)?;
        Ok((Self { inner }, hist))
    }
    /// DDIM decode; `indices[k]` fixes the noise seed of `triples[k]`.
    /// `options` is a JSON `DecodeOptions` (direct fusion, 20 steps when omitted).
    #[pyo3(signature = (triples, indices, options=None))]
    fn decode(&self, py: Python<'_>, triples: Vec<PyRef<'_, PyTriple>>, indices: Vec<usize>, options: Option<&str>) -> PyResult<Vec<PyImage>> {
        let opts: DecodeOptions = json(options)?;
        let ts: Vec<RepresentationTriple> = triples.iter().map(|t| t.inner.clone()).collect();
        let imgs = py
            .detach(|| {
                let refs: Vec<&RepresentationTriple> = ts.iter().collect();
                decode_triples(&self.inner, &refs, &indices, &opts)
            })
            .map_err(err)?;
        Ok(imgs.into_iter().map(|inner| PyImage { inner }).collect())
    }
}

#[pyfunction(name = "pixcorr")]
fn py_pixcorr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    pixcorr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction(name = "ssim")]
fn py_ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    ssim(&a.inner, &b.inner).map_err(err)
}

/// Two-way identification accuracy with raw features.
#[pyfunction(name = "two_way")]
fn py_two_way(decoded: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    two_way_identification(&decoded, &gt, identity_features).map_err(err)
}

#[pymodule]
fn braid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BraidError", m.py().get_type::<BraidError>())?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyTriple>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBai>()?;
    m.add_class::<PyPairs>()?;
    m.add_class::<PyDiffusion>()?;
    m.add_function(wrap_pyfunction!(py_pixcorr, m)?)?;
    m.add_function(wrap_pyfunction!(py_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(py_two_way, m)?)?;
    Ok(())
}
