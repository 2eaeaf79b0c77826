//! Python bindings: experiment pipeline stages, snapshots and the metric and
//! substitute primitives. Structured results cross the boundary as plain
//! dicts and lists.

use std::path::PathBuf;

use gan_unlearning::experiments::{compare_runs as compare_runs_impl, emit_plots as emit_plots_impl, ExperimentConfig, Pipeline};
use gan_unlearning::metrics::{self, GaussianStats};
use gan_unlearning::models::ModelSnapshot;
use gan_unlearning::substitution::{self, LatentStats};
use gan_unlearning::{datasets, Error};
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::MissingArtifacts(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn json_of(v: impl serde::Serialize) -> PyResult<Value> {
    serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A resolved experiment config bound to its stage cache.
#[pyclass(unsendable)]
struct Experiment {
    inner: Pipeline,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config, overrides = Vec::new(), force = false))]
    fn new(config: PathBuf, overrides: Vec<String>, force: bool) -> PyResult<Self> {
        let cfg = ExperimentConfig::load_with_overrides(&config, &overrides).map_err(py_err)?;
        let mut inner = Pipeline::new(&cfg).map_err(py_err)?;
        inner.force = force;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir().to_path_buf()
    }

    /// The resolved config, with every derived seed filled in.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &json_of(&self.inner.config)?)
    }

    /// Stage records so far: name, cache key, directory and whether reused.
    fn stages<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &json_of(self.inner.records())?)
    }

    fn split<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, plan) = self.inner.split().map_err(py_err)?;
        to_py(py, &json_of(&plan)?)
    }

    /// Pretrains (or reuses) the raw GAN.
    fn train(&mut self) -> PyResult<Snapshot> {
        let (_, snap) = self.inner.raw_gan().map_err(py_err)?;
        Ok(Snapshot { inner: snap })
    }

    fn train_classifier(&mut self) -> PyResult<()> {
        self.inner.classifier().map_err(py_err).map(|_| ())
    }

    /// Latent codes of the unlearning images and their pixel errors.
    fn invert<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, inv) = self.inner.inversion().map_err(py_err)?;
        to_py(py, &json!({"ids": inv.ids, "labels": inv.labels, "latent_codes": rows(&inv.latent_codes), "final_errors": inv.final_errors}))
    }

    fn stats<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, s) = self.inner.latent_stats().map_err(py_err)?;
        to_py(py, &json_of(&s)?)
    }

    fn unlearn<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, o) = self.inner.unlearn().map_err(py_err)?;
        to_py(py, &json_of(&o)?)
    }

    fn retrain_baseline<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, report, _) = self.inner.baseline().map_err(py_err)?;
        to_py(py, &json_of(&report)?)
    }

    fn evaluate<'py>(&mut self, py: Python<'py>, snapshot: &Snapshot) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.evaluate_snapshot(&snapshot.inner).map_err(py_err)?;
        to_py(py, &json_of(&report)?)
    }

    /// LOGAN membership audit AUC of the snapshot's discriminator.
    fn audit(&mut self, snapshot: &Snapshot) -> PyResult<f64> {
        self.inner.audit_snapshot(&snapshot.inner).map_err(py_err)
    }

    /// Every stage, reports, plots and the manifest; returns a summary.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.run().map_err(py_err)?;
        let summary = json!({
            "manifest": self.inner.run_dir().join("manifest.json"),
            "pre": s.outcome.pre(),
            "post": s.outcome.post(),
            "stop_reason": s.outcome.stop_reason,
            "iterations": s.outcome.iterations,
            "wall_time_s": s.outcome.wall_time_s,
            "baseline": s.baseline,
            "saving_factor": s.saving_factor(),
            "stages": s.stages,
        });
        to_py(py, &summary)
    }
}

/// A saved generator/discriminator (or classifier) pair.
#[pyclass]
struct Snapshot {
    inner: ModelSnapshot,
}

#[pymethods]
impl Snapshot {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ModelSnapshot::load(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn parameter_hash(&self) -> String {
        self.inner.parameter_hash()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.arch.latent_dim
    }

    /// Generator outputs for latent rows `z` conditioned on `labels`.
    fn generate(&self, z: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.generator().map_err(py_err)?;
        let out = metrics::generate_batched(&g, matrix(z)?.view(), &labels).map_err(py_err)?;
        Ok(rows(&out))
    }

    /// Raw discriminator scores of samples `x` under `labels`.
    fn scores(&self, x: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        let d = self.inner.discriminator().map_err(py_err)?;
        Ok(metrics::discriminator_scores(&d, matrix(x)?.view(), &labels).map_err(py_err)?.to_vec())
    }
}

/// Probability that a draw from `a` outscores a draw from `b` (ties count half).
#[pyfunction]
fn auc(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&a, &b).map_err(py_err)
}

/// Fréchet distance between Gaussians given as (mean, row-major covariance).
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<f64>, mean_b: Vec<f64>, cov_b: Vec<f64>) -> PyResult<f64> {
    let a = GaussianStats { mean: mean_a, covariance: cov_a, count: 0 };
    let b = GaussianStats { mean: mean_b, covariance: cov_b, count: 0 };
    metrics::frechet_distance(&a, &b).map_err(py_err)
}

/// Samples and labels of the 2-D ring fixture.
#[pyfunction]
#[pyo3(signature = (n_modes = 8, per_mode = 100, radius = 0.8, noise_sigma = 0.04, seed = 0))]
fn make_ring(n_modes: usize, per_mode: usize, radius: f64, noise_sigma: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let data = datasets::make_synthetic_ring(n_modes, per_mode, radius, noise_sigma, seed).map_err(py_err)?;
    Ok((rows(&data.samples().to_owned()), data.labels().to_vec()))
}

fn latent_stats(codes: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> PyResult<LatentStats> {
    substitution::compute_latent_stats(matrix(codes)?.view(), &labels, num_classes).map_err(py_err)
}

/// Substitute code for `z0` under an item mechanism, with latent statistics
/// computed from `codes`/`labels`.
#[pyfunction]
#[pyo3(signature = (mechanism, z0, codes, labels, num_classes, parameter = 0.5))]
fn substitute(mechanism: &str, z0: Vec<f64>, codes: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, parameter: f64) -> PyResult<Vec<f64>> {
    let stats = latent_stats(codes, labels, num_classes)?;
    let z0 = Array1::from(z0);
    let z = match mechanism {
        "average" => substitution::substitute_average(&stats),
        "truncation" => substitution::substitute_truncation(z0.view(), &stats, parameter).map_err(py_err)?,
        "projection" => substitution::substitute_projection(z0.view(), &stats, parameter).map_err(py_err)?.code,
        other => return Err(PyValueError::new_err(format!("unknown item mechanism {other:?}"))),
    };
    Ok(z.to_vec())
}

/// Nearest other-class mean to `z0` and the class it belongs to.
#[pyfunction]
fn substitute_other_class(z0: Vec<f64>, y0: usize, codes: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> PyResult<(Vec<f64>, usize)> {
    let stats = latent_stats(codes, labels, num_classes)?;
    let (z, y) = substitution::substitute_other_class(Array1::from(z0).view(), y0, &stats).map_err(py_err)?;
    Ok((z.to_vec(), y))
}

#[pyfunction]
fn emit_plots(run_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    emit_plots_impl(run_dir).map_err(py_err)
}

/// Writes the comparison CSV and returns its rows.
#[pyfunction]
#[pyo3(signature = (manifests, out, baseline = None))]
fn compare_runs<'py>(py: Python<'py>, manifests: Vec<PathBuf>, out: PathBuf, baseline: Option<String>) -> PyResult<Bound<'py, PyAny>> {
    let table = compare_runs_impl(&manifests, baseline.as_deref(), out).map_err(py_err)?;
    to_py(py, &json_of(&table)?)
}

#[pymodule]
fn gan_unlearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_class::<Snapshot>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(make_ring, m)?)?;
    m.add_function(wrap_pyfunction!(substitute, m)?)?;
    m.add_function(wrap_pyfunction!(substitute_other_class, m)?)?;
    m.add_function(wrap_pyfunction!(emit_plots, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    Ok(())
}
