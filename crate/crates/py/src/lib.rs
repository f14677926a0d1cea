//! Python bindings for `drgrade`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use drgrade::labels::{self, Grade, OrdinalVector};
use drgrade::metrics::{self, Averaging, MetricsReport};
use drgrade::model;
use drgrade::pipeline::{self, Ensemble, PipelineConfig};
use drgrade::preprocess::{self, GaussianKernelSpec, ImageGrid, PreprocessConfig};
use drgrade::shapecalc::{self, ConvSpec, PoolSpec, VolumeShape};

create_exception!(drgrade_py, DrgradeError, PyException);

fn err(e: drgrade::Error) -> PyErr {
    DrgradeError::new_err(e.to_string())
}

fn grades(values: &[i64]) -> PyResult<Vec<Grade>> {
    values.iter().map(|&g| Grade::new(g).map_err(err)).collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    d.set_item("qwk", m.qwk)?;
    d.set_item("confusion", m.confusion.counts.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

/// Cumulative ordinal target for a grade in 0..4.
#[pyfunction]
fn encode(grade: i64) -> PyResult<Vec<f64>> {
    Ok(labels::encode(Grade::new(grade).map_err(err)?).0.to_vec())
}

#[pyfunction]
#[pyo3(signature = (probs, threshold = labels::DEFAULT_DECODE_THRESHOLD))]
fn decode(probs: Vec<f64>, threshold: f64) -> PyResult<u8> {
    let v = OrdinalVector::from_slice(&probs).map_err(err)?;
    Ok(labels::decode(&v, threshold).value())
}

#[pyfunction]
fn bce_loss(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    let p = OrdinalVector::from_slice(&pred).map_err(err)?;
    let t = OrdinalVector::from_slice(&target).map_err(err)?;
    Ok(model::bce_loss(&p, &t))
}

/// Per-class index lists after balancing each class to `target` entries.
#[pyfunction]
#[pyo3(signature = (class_counts, target, seed = 0))]
fn resample_plan(class_counts: BTreeMap<i64, usize>, target: usize, seed: u64) -> PyResult<BTreeMap<u8, Vec<usize>>> {
    let counts = class_counts
        .into_iter()
        .map(|(g, n)| Ok((Grade::new(g).map_err(err)?, n)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    let plan = labels::build_resample_plan(&counts, target, seed).map_err(err)?;
    Ok(plan.mapping.into_iter().map(|(g, v)| (g.value(), v)).collect())
}

/// `(width, height, depth)` after a convolution.
#[pyfunction]
#[pyo3(signature = (width, height, depth, filter, num_filters, padding = 0, stride = 1))]
fn conv_output_shape(
    width: usize,
    height: usize,
    depth: usize,
    filter: usize,
    num_filters: usize,
    padding: usize,
    stride: usize,
) -> PyResult<(usize, usize, usize)> {
    let v = shapecalc::conv_output_shape(
        VolumeShape::new(width, height, depth),
        ConvSpec::new(filter, num_filters, padding, stride),
    )
    .map_err(err)?;
    Ok((v.width, v.height, v.depth))
}

#[pyfunction]
#[pyo3(signature = (width, height, depth, window, stride = None))]
fn pool_output_shape(
    width: usize,
    height: usize,
    depth: usize,
    window: usize,
    stride: Option<usize>,
) -> PyResult<(usize, usize, usize)> {
    let v = shapecalc::pool_output_shape(
        VolumeShape::new(width, height, depth),
        PoolSpec::new(window, stride.unwrap_or(window)),
    )
    .map_err(err)?;
    Ok((v.width, v.height, v.depth))
}

#[pyfunction]
fn quadratic_weighted_kappa(actual: Vec<i64>, predicted: Vec<i64>) -> PyResult<f64> {
    let cm = metrics::confusion(&grades(&actual)?, &grades(&predicted)?).map_err(err)?;
    metrics::quadratic_weighted_kappa(&cm).map_err(err)
}

/// Accuracy, precision, recall, F1, QWK and the confusion matrix.
#[pyfunction]
#[pyo3(signature = (actual, predicted, averaging = "weighted"))]
fn evaluate<'py>(py: Python<'py>, actual: Vec<i64>, predicted: Vec<i64>, averaging: &str) -> PyResult<Bound<'py, PyDict>> {
    let avg: Averaging = averaging.parse().map_err(err)?;
    let report = metrics::evaluate(&grades(&actual)?, &grades(&predicted)?, avg).map_err(err)?;
    metrics_dict(py, &report)
}

/// Loads and preprocesses an image; returns `(height, width, channels, pixels)`.
#[pyfunction]
#[pyo3(signature = (path, target_size = 224, sigma = 10.0))]
fn preprocess_file(py: Python<'_>, path: PathBuf, target_size: usize, sigma: f64) -> PyResult<(usize, usize, usize, Vec<f64>)> {
    let cfg = PreprocessConfig {
        target_size,
        kernel: GaussianKernelSpec::for_sigma(sigma, target_size),
        ..PreprocessConfig::default()
    };
    let img: ImageGrid = py
        .detach(|| cfg.validate().and_then(|_| pipeline::load_preprocessed(&path, &cfg)))
        .map_err(err)?;
    let (h, w, c) = img.shape();
    Ok((h, w, c, img.into_pixels()))
}

#[pyfunction]
fn gaussian_blur(height: usize, width: usize, channels: usize, pixels: Vec<f64>, sigma: f64, half_size: usize) -> PyResult<Vec<f64>> {
    let img = ImageGrid::new(height, width, channels, pixels).map_err(err)?;
    let kernel = GaussianKernelSpec::new(sigma, sigma, half_size).map_err(err)?;
    Ok(preprocess::gaussian_blur(&img, &kernel).into_pixels())
}

/// Writes a synthetic APTOS-layout dataset; returns the number of images.
#[pyfunction]
#[pyo3(signature = (n_per_class, size, seed, out_dir))]
fn generate_synthetic(py: Python<'_>, n_per_class: usize, size: usize, seed: u64, out_dir: PathBuf) -> PyResult<usize> {
    py.detach(|| pipeline::generate_synthetic(n_per_class, size, seed, &out_dir))
        .map(|m| m.len())
        .map_err(err)
}

/// Pipeline configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: PipelineConfig::default(),
        }
    }

    /// Desk-scale preset writing to `output_dir`.
    #[staticmethod]
    fn smoke(output_dir: PathBuf) -> Self {
        Self {
            inner: PipelineConfig::smoke(output_dir),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_flat_toml().map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    #[getter]
    fn epochs_base(&self) -> usize {
        self.inner.train_base.epochs
    }

    #[setter]
    fn set_epochs_base(&mut self, n: usize) {
        self.inner.train_base.epochs = n;
    }

    #[getter]
    fn epochs_meta(&self) -> usize {
        self.inner.train_meta.epochs
    }

    #[setter]
    fn set_epochs_meta(&mut self, n: usize) {
        self.inner.train_meta.epochs = n;
    }

    #[getter]
    fn resample_target(&self) -> usize {
        self.inner.resample_target
    }

    #[setter]
    fn set_resample_target(&mut self, n: usize) {
        self.inner.resample_target = n;
    }

    #[getter]
    fn backbones(&self) -> Vec<String> {
        self.inner.backbones.clone()
    }

    #[setter]
    fn set_backbones(&mut self, names: Vec<String>) {
        self.inner.backbones = names;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, backbones={:?}, output_dir={:?})",
            self.inner.seed, self.inner.backbones, self.inner.output_dir
        )
    }
}

/// Runs the full flow and returns the validation metrics of the ensemble and
/// each branch, keyed `ensemble`, `branch0`, `branch1`.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ensemble", metrics_dict(py, &report.metrics)?)?;
    for b in &report.branches {
        d.set_item(&b.name, metrics_dict(py, &b.metrics)?)?;
    }
    Ok(d)
}

/// A trained ensemble loaded from a run directory.
#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    inner: Ensemble,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(py: Python<'_>, model_dir: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| Ensemble::load_from_model_dir(&model_dir)).map_err(err)?;
        Ok(Self { inner })
    }

    /// `(grade, probabilities)` for a raw image file.
    fn predict(&self, py: Python<'_>, path: PathBuf) -> PyResult<(u8, Vec<f64>)> {
        let (g, p) = py.detach(|| self.inner.predict_path(&path)).map_err(err)?;
        Ok((g.value(), p.0.to_vec()))
    }

    #[getter]
    fn backbones(&self) -> Vec<String> {
        self.inner.branches.iter().map(|b| b.backbone.name.clone()).collect()
    }
}

#[pymodule]
fn drgrade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DrgradeError", m.py().get_type::<DrgradeError>())?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(resample_plan, m)?)?;
    m.add_function(wrap_pyfunction!(conv_output_shape, m)?)?;
    m.add_function(wrap_pyfunction!(pool_output_shape, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_weighted_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_file, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_blur, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnsemble>()?;
    Ok(())
}
