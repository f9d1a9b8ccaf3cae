//! Python bindings for crema-core.

use std::path::PathBuf;

use crema_core::cli::load_run_data;
use crema_core::config::{RawConfig, RunConfig};
use crema_core::credibility;
use crema_core::data::{self, BlobSpec, NoiseKind};
use crema_core::labelstore;
use crema_core::losses::{self, ProbVec};
use crema_core::mixture::{self, MixtureKind};
use crema_core::trainer::{self, EpochMetrics};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: crema_core::Error) -> PyErr {
    use crema_core::Error as E;
    match e {
        E::Io(io) => PyIOError::new_err(io.to_string()),
        E::State(_) | E::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn prob(p: Vec<f64>) -> PyResult<ProbVec> {
    ProbVec::new(p).map_err(to_py)
}

/// Features plus labels.
#[pyclass(module = "crema", frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (features, labels, num_classes=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: Option<usize>) -> PyResult<Self> {
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let inner = data::Dataset::new(matrix(features)?, labels, c).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Gaussian blobs, one cluster per class.
    #[staticmethod]
    #[pyo3(signature = (classes, dims, per_class, center_scale=4.0, std=1.0, seed=0))]
    fn blobs(classes: usize, dims: usize, per_class: usize, center_scale: f64, std: f64, seed: u64) -> PyResult<Self> {
        let spec = BlobSpec {
            num_classes: classes,
            dims,
            samples_per_class: per_class,
            class_center_scale: center_scale,
            cluster_std: std,
            seed,
        };
        Ok(Self {
            inner: data::gen_blobs(&spec).map_err(to_py)?,
        })
    }

    /// IDX image and label files, optionally gzipped.
    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_idx(&images, &labels).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.features())
    }

    /// Seeded (train, test) split.
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = self.inner.split(test_fraction, seed).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dims={}, classes={})",
            self.inner.len(),
            self.inner.dims(),
            self.inner.num_classes()
        )
    }
}

/// A dataset whose observed labels were drawn from a transition matrix.
#[pyclass(module = "crema", frozen)]
struct NoisyDataset {
    inner: data::NoisyDataset,
}

#[pymethods]
impl NoisyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn observed_labels(&self) -> Vec<usize> {
        self.inner.observed_labels().to_vec()
    }

    #[getter]
    fn true_labels(&self) -> Vec<usize> {
        self.inner.true_labels().to_vec()
    }

    #[getter]
    fn clean_mask(&self) -> Vec<bool> {
        self.inner.clean_mask()
    }

    #[getter]
    fn noise_fraction(&self) -> f64 {
        self.inner.noise_fraction()
    }

    #[getter]
    fn transition(&self) -> Vec<Vec<f64>> {
        rows(self.inner.transition().rows())
    }

    fn __repr__(&self) -> String {
        format!(
            "NoisyDataset(n={}, noise_fraction={:.4})",
            self.inner.len(),
            self.inner.noise_fraction()
        )
    }
}

/// Target transition matrix for a noise kind.
#[pyfunction]
#[pyo3(signature = (kind, tau, num_classes, class_map=None))]
fn transition_matrix(kind: &str, tau: f64, num_classes: usize, class_map: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
    let kind: NoiseKind = kind.parse().map_err(to_py)?;
    let map = class_map.map(data::parse_class_map).transpose().map_err(to_py)?;
    let t = data::make_transition(kind, tau, num_classes, map.as_ref()).map_err(to_py)?;
    Ok(rows(t.rows()))
}

/// Draws every observed label independently from its true class's row.
#[pyfunction]
#[pyo3(signature = (dataset, kind, tau, seed, class_map=None))]
fn inject_noise(dataset: &Dataset, kind: &str, tau: f64, seed: u64, class_map: Option<&str>) -> PyResult<NoisyDataset> {
    let kind: NoiseKind = kind.parse().map_err(to_py)?;
    let map = class_map.map(data::parse_class_map).transpose().map_err(to_py)?;
    let t = data::make_transition(kind, tau, dataset.inner.num_classes(), map.as_ref()).map_err(to_py)?;
    Ok(NoisyDataset {
        inner: data::inject_noise(&dataset.inner, &t, seed).map_err(to_py)?,
    })
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(losses::softmax(&logits).map_err(to_py)?.into_inner())
}

#[pyfunction]
fn kl_div(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    losses::kl_div(&prob(p)?, &prob(q)?).map_err(to_py)
}

#[pyfunction]
fn js_div(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    losses::js_div(&prob(p)?, &prob(q)?).map_err(to_py)
}

/// Fits a two-component mixture to per-sample losses and returns clean
/// posteriors with fit diagnostics.
#[pyfunction]
#[pyo3(signature = (losses, kind="gmm", tol=mixture::DEFAULT_TOL, max_iter=mixture::DEFAULT_MAX_ITER))]
fn fit_mixture<'py>(
    py: Python<'py>,
    losses: Vec<f64>,
    kind: &str,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: MixtureKind = kind.parse().map_err(to_py)?;
    let (post, m, report) = mixture::clean_posteriors(kind, &losses, tol, max_iter).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("posteriors", post)?;
    d.set_item("clean_mean", m.clean().mean())?;
    d.set_item("noisy_mean", m.noisy().mean())?;
    d.set_item("clean_weight", m.weights[m.clean_component])?;
    d.set_item("log_likelihood", report.log_likelihood)?;
    d.set_item("history", report.history)?;
    d.set_item("iterations", report.iterations)?;
    d.set_item("converged", report.converged)?;
    d.set_item("degenerate", report.degenerate)?;
    Ok(d)
}

/// Sliding window of per-epoch clean posteriors.
#[pyclass(module = "crema")]
struct CredibilityBank {
    inner: credibility::CredibilityBank,
}

#[pymethods]
impl CredibilityBank {
    #[new]
    #[pyo3(signature = (num_samples, window=credibility::DEFAULT_WINDOW))]
    fn new(num_samples: usize, window: usize) -> PyResult<Self> {
        Ok(Self {
            inner: credibility::CredibilityBank::new(num_samples, window).map_err(to_py)?,
        })
    }

    fn push_epoch(&mut self, posteriors: Vec<f64>) -> PyResult<()> {
        self.inner.push_epoch(&posteriors).map_err(to_py)
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    #[getter]
    fn epochs_recorded(&self) -> usize {
        self.inner.epochs_recorded()
    }

    /// Stored posteriors, most recent first.
    fn history(&self, sample_id: usize) -> PyResult<Vec<f64>> {
        self.inner.history(sample_id).map_err(to_py)
    }

    fn sequential_log_likelihood(&self, sample_id: usize) -> PyResult<f64> {
        self.inner.sequential_log_likelihood(sample_id).map_err(to_py)
    }

    fn stability(&self, sample_id: usize) -> PyResult<f64> {
        self.inner.stability(sample_id).map_err(to_py)
    }

    fn credibility_weight(&self, sample_id: usize) -> PyResult<f64> {
        self.inner.credibility_weight(sample_id).map_err(to_py)
    }

    fn weights(&self) -> PyResult<Vec<f64>> {
        self.inner.weights().map_err(to_py)
    }
}

/// Trainable label logits, one row per training sample.
#[pyclass(module = "crema")]
struct LabelStore {
    inner: labelstore::LabelStore,
}

#[pymethods]
impl LabelStore {
    #[new]
    #[pyo3(signature = (observed, num_classes, alpha=labelstore::DEFAULT_ALPHA, lr=labelstore::DEFAULT_LAMBDA))]
    fn new(observed: Vec<usize>, num_classes: usize, alpha: f64, lr: f64) -> PyResult<Self> {
        Ok(Self {
            inner: labelstore::LabelStore::init(&observed, num_classes, alpha, lr).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn soft_labels(&self, ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.soft_labels(&ids).map_err(to_py)?))
    }

    /// One gradient step on the label logits of `ids`, given the loss
    /// gradient with respect to their soft labels. `eligible` holds one flag
    /// per stored sample; ids without the flag are left alone.
    fn update_labels(&mut self, ids: Vec<usize>, d_soft: Vec<Vec<f64>>, eligible: Vec<bool>) -> PyResult<()> {
        let g = matrix(d_soft)?;
        self.inner.update_labels(&ids, g.view(), &eligible).map_err(to_py)
    }

    fn hard_labels(&self) -> Vec<usize> {
        self.inner.hard_labels()
    }
}

fn run_config(text: &str, overrides: &[String]) -> PyResult<RunConfig> {
    let mut raw = RawConfig::parse(text).map_err(to_py)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| PyValueError::new_err(format!("override `{o}` is not KEY=VALUE")))?;
        raw.set(k.trim(), v.trim()).map_err(to_py)?;
    }
    RunConfig::from_raw(&raw).map_err(to_py)
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("train_loss", m.train_loss)?;
    d.set_item("acc1", m.acc1)?;
    d.set_item("acc2", m.acc2)?;
    d.set_item("acc_mean", m.acc_mean)?;
    d.set_item("clean_precision", m.clean_precision)?;
    d.set_item("clean_recall", m.clean_recall)?;
    d.set_item("label_fix_acc", m.label_fix_acc)?;
    d.set_item("mean_w_clean", m.mean_w_clean)?;
    d.set_item("mean_w_noisy", m.mean_w_noisy)?;
    Ok(d)
}

fn run_training<'py>(
    py: Python<'py>,
    cfg: &RunConfig,
    train: &data::NoisyDataset,
    test: &data::Dataset,
    on_epoch: Option<Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    cfg.train.validate().map_err(to_py)?;
    let mut callback_err = None;
    let result = trainer::run(&cfg.train, train, test, |m| {
        if let Some(f) = &on_epoch {
            if let Err(e) = metrics_dict(py, m).and_then(|d| f.call1((d,))) {
                callback_err = Some(e);
                return Err(crema_core::Error::State("on_epoch callback raised".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = callback_err {
        return Err(e);
    }
    let out = result.map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mode", out.report.mode.as_str())?;
    d.set_item("last10_acc", out.report.last10_acc)?;
    let epochs = out
        .report
        .epochs
        .iter()
        .map(|m| metrics_dict(py, m))
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("epochs", epochs)?;
    d.set_item("labels", out.state.labels.as_ref().map(|s| s.hard_labels()))?;
    Ok(d)
}

/// Trains on the data a config describes. `config` holds `key = value`
/// lines; `overrides` are `key=value` strings applied on top.
#[pyfunction]
#[pyo3(signature = (config="", overrides=Vec::new(), on_epoch=None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Vec<String>,
    on_epoch: Option<Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config, &overrides)?;
    let (train, test) = load_run_data(&cfg).map_err(to_py)?;
    run_training(py, &cfg, &train, &test, on_epoch)
}

/// Trains on caller-supplied data; config keys under `data.*` and `noise.*`
/// are ignored.
#[pyfunction]
#[pyo3(signature = (train, test, config="", overrides=Vec::new(), on_epoch=None))]
fn train_on<'py>(
    py: Python<'py>,
    train: &NoisyDataset,
    test: &Dataset,
    config: &str,
    overrides: Vec<String>,
    on_epoch: Option<Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config, &overrides)?;
    run_training(py, &cfg, &train.inner, &test.inner, on_epoch)
}

#[pymodule]
fn crema(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<NoisyDataset>()?;
    m.add_class::<CredibilityBank>()?;
    m.add_class::<LabelStore>()?;
    m.add_function(wrap_pyfunction!(transition_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(js_div, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_on, m)?)?;
    Ok(())
}
