//! Python bindings: configuration, dataset generation, the two-stream model
//! (train / evaluate / predict / checkpoint / Grad-CAM) and a few tensor
//! helpers. Tensors cross the boundary as `(shape, flat list)` pairs.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use refocus_core::config::RunConfig;
use refocus_core::data::{self, Sample};
use refocus_core::model::TwoStreamModel;
use refocus_core::patches::{self, PatchSpec};
use refocus_core::train::{self, local_input};
use refocus_core::{checkpoint, saliency, Parameters};

fn err(e: refocus_core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.code()))
}

#[pyclass(name = "Tensor", module = "refocus", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: refocus_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        let inner = refocus_core::Tensor::new(shape, data).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        refocus_core::tensor::tnsr::save(&self.inner, path.as_ref()).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = refocus_core::tensor::tnsr::load(path.as_ref()).map_err(err)?;
        Ok(Self { inner })
    }
}

#[pyclass(name = "Config", module = "refocus", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// `json` is a configuration document (defaults when omitted);
    /// `overrides` are `section.key=value` strings.
    #[new]
    #[pyo3(signature = (json=None, overrides=Vec::new()))]
    fn new(json: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_json(json, &overrides).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::new(Some(&self.inner.to_json()), overrides)
    }
}

#[pyclass(name = "Sample", module = "refocus", from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn image_id(&self) -> String {
        self.inner.image_id.clone()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn image(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.image.clone(),
        }
    }

    /// `(x_tl, y_tl, x_br, y_br)` tuples, bottom-right exclusive.
    #[getter]
    fn patches(&self) -> Vec<(usize, usize, usize, usize)> {
        self.inner.patches.iter().map(|p| (p.x_tl, p.y_tl, p.x_br, p.y_br)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample(image_id={:?}, label={})", self.inner.image_id, self.inner.label)
    }
}

fn wrap(samples: Vec<Sample>) -> Vec<PySample> {
    samples.into_iter().map(|inner| PySample { inner }).collect()
}

fn unwrap(samples: &[PySample]) -> Vec<Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

/// `(train, test)` generated from the configuration's `data` section.
#[pyfunction]
fn generate(config: &PyConfig) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
    let (tr, te) = data::generate(&config.inner.data).map_err(err)?;
    Ok((wrap(tr), wrap(te)))
}

#[pyfunction]
fn write_dataset(path: &str, samples: Vec<PySample>) -> PyResult<()> {
    data::write_dataset(path.as_ref(), &unwrap(&samples)).map_err(err)
}

#[pyfunction]
fn read_dataset(path: &str) -> PyResult<Vec<PySample>> {
    Ok(wrap(data::read_dataset(path.as_ref()).map_err(err)?))
}

#[pyfunction]
fn grid_patches(width: usize, height: usize, n: usize, scale: f64) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let ps = patches::grid_patches(width, height, n, scale).map_err(err)?;
    Ok(ps.iter().map(|p| (p.x_tl, p.y_tl, p.x_br, p.y_br)).collect())
}

#[pyfunction]
fn crop_resize(image: &PyTensor, patch: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> PyResult<PyTensor> {
    let spec = PatchSpec::new(patch.0, patch.1, patch.2, patch.3);
    let inner = patches::crop_resize(&image.inner, &spec, out_h, out_w).map_err(err)?;
    Ok(PyTensor { inner })
}

#[pyclass(name = "Model", module = "refocus")]
pub struct PyModel {
    inner: TwoStreamModel,
    config: RunConfig,
}

fn metrics_dict<'py>(py: Python<'py>, r: &train::MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("global_acc", r.global_acc)?;
    d.set_item("local_acc", r.local_acc)?;
    d.set_item("fused_acc", r.fused_acc)?;
    d.set_item("wall_ms", r.wall_ms as u64)?;
    Ok(d)
}

impl PyModel {
    fn sample_input(&self, sample: &PySample, patch: usize) -> PyResult<refocus_core::Tensor> {
        let s = &sample.inner;
        let spec = s.patches.get(patch).ok_or_else(|| {
            PyValueError::new_err(format!("E_VALIDATION: sample {} has no patch {patch}", s.image_id))
        })?;
        local_input(s, spec, self.config.train.patch_size).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model from `config.model`, initialised from `seed`
    /// (`config.train.seed` when omitted).
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let inner = TwoStreamModel::init(cfg.model.clone(), seed.unwrap_or(cfg.train.seed)).map_err(err)?;
        Ok(Self { inner, config: cfg })
    }

    /// Loads a checkpoint written by `save` (or the CLI) under `config`.
    #[staticmethod]
    fn load(config: &PyConfig, path: &str) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let mut inner = TwoStreamModel::zeros(cfg.model.clone()).map_err(err)?;
        checkpoint::load_into(path.as_ref(), &mut inner).map_err(err)?;
        Ok(Self { inner, config: cfg })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path.as_ref()).map_err(err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.named().into_iter().map(|(n, _)| n).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.inner
            .named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| PyTensor { inner: t.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("E_VALIDATION: no parameter {name}")))
    }

    /// Trains in place with `config.train`; returns one dict per epoch.
    fn fit<'py>(&mut self, py: Python<'py>, train: Vec<PySample>, test: Vec<PySample>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = train::train(&mut self.inner, &unwrap(&train), &unwrap(&test), &self.config.train, |_| {})
            .map_err(err)?;
        rows.iter().map(|r| metrics_dict(py, r)).collect()
    }

    /// Accuracies of both streams and their fusion on `samples`.
    fn evaluate<'py>(&self, py: Python<'py>, samples: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
        let o = &self.config.train;
        let r = train::evaluate(&self.inner, &unwrap(&samples), &o.weights, o.eval_patch, o.patch_size)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("global_acc", r.global_acc)?;
        d.set_item("local_acc", r.local_acc)?;
        d.set_item("fused_acc", r.fused_acc)?;
        d.set_item("alphas", r.rows.iter().map(|row| row.alphas.clone()).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Probabilities for one sample using its `patch`-th patch.
    #[pyo3(signature = (sample, patch=0))]
    fn predict<'py>(&self, py: Python<'py>, sample: &PySample, patch: usize) -> PyResult<Bound<'py, PyDict>> {
        let input = self.sample_input(sample, patch)?;
        let p = self
            .inner
            .forward(&sample.inner.image, &input, &self.config.train.weights)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("global", p.global_probs.data().to_vec())?;
        d.set_item("local", p.local_probs.data().to_vec())?;
        d.set_item("fused", p.fused_probs.data().to_vec())?;
        d.set_item("alphas", p.alphas)?;
        Ok(d)
    }

    /// One Grad-CAM heatmap per refiner step for `class_id`.
    #[pyo3(signature = (sample, class_id, patch=0))]
    fn grad_cam(&self, sample: &PySample, class_id: usize, patch: usize) -> PyResult<Vec<PyTensor>> {
        let input = self.sample_input(sample, patch)?;
        let maps = saliency::grad_cam_sweep(&self.inner, &input, class_id, &format!("p{patch}")).map_err(err)?;
        Ok(maps.into_iter().map(|h| PyTensor { inner: h.values }).collect())
    }
}

#[pymodule]
fn refocus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(grid_patches, m)?)?;
    m.add_function(wrap_pyfunction!(crop_resize, m)?)?;
    Ok(())
}
