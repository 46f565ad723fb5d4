//! Python bindings for the unlearning lab.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use amulab_core::eval::{best_threshold_score, rows_to_csv};
use amulab_core::gaussianize::{self, LossOrigin, LossVector, Temperature, TransformedSample};
use amulab_core::harness::{ablate as run_ablate, pretrain, run_experiment, save_dataset, ExperimentConfig, RunRecord};

fn py_err(e: amulab_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load_config(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<ExperimentConfig> {
    ExperimentConfig::load(config.as_deref(), &overrides).map_err(py_err)
}

fn record_json(record: &RunRecord) -> PyResult<String> {
    serde_json::to_string(record).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `probit(clamp(soft_cdf(log1p(losses), k)))` for raw per-sample losses.
#[pyfunction]
#[pyo3(signature = (losses, k = 100.0))]
fn gaussianize_losses(losses: Vec<f64>, k: f64) -> PyResult<Vec<f64>> {
    let k = Temperature::new(k).map_err(py_err)?;
    let v = LossVector::from_raw(&losses, LossOrigin::Other);
    Ok(gaussianize::gaussianize_losses(&v, k).map_err(py_err)?.z)
}

/// Biased MMD^2 with a bandwidth-1 Gaussian kernel.
#[pyfunction]
fn mmd(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    gaussianize::mmd(&TransformedSample { z: a }, &TransformedSample { z: b }).map_err(py_err)
}

#[pyfunction]
fn probit(q: f64) -> f64 {
    gaussianize::probit(q)
}

/// Best-threshold balanced accuracy in percent, in [50, 100].
#[pyfunction]
fn threshold_mia(members: Vec<f64>, non_members: Vec<f64>) -> PyResult<f64> {
    best_threshold_score(&members, &non_members).map_err(py_err)
}

/// Writes the configured dataset to `path`; returns (samples, dim, classes).
#[pyfunction]
#[pyo3(signature = (path, overrides = vec![], config = None))]
fn gen_data(path: PathBuf, overrides: Vec<String>, config: Option<PathBuf>) -> PyResult<(usize, usize, usize)> {
    let cfg = load_config(config, overrides)?;
    let ds = cfg.data.load().map_err(py_err)?;
    save_dataset(&ds, &path).map_err(py_err)?;
    Ok((ds.len(), ds.dim(), ds.classes))
}

/// Pretrains the configured classifier and returns its parameters as JSON.
#[pyfunction]
#[pyo3(signature = (overrides = vec![], config = None))]
fn pretrain_json(py: Python<'_>, overrides: Vec<String>, config: Option<PathBuf>) -> PyResult<String> {
    let cfg = load_config(config, overrides)?;
    let model = py.detach(|| {
        let ds = cfg.data.load()?;
        pretrain(&cfg, &ds, cfg.pretrain.seed)
    });
    serde_json::to_string(&model.map_err(py_err)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the pipeline; returns (results CSV, run record JSON).
#[pyfunction]
#[pyo3(signature = (overrides = vec![], config = None))]
fn pipeline(py: Python<'_>, overrides: Vec<String>, config: Option<PathBuf>) -> PyResult<(String, String)> {
    let cfg = load_config(config, overrides)?;
    let record = py.detach(|| run_experiment(&cfg)).map_err(py_err)?;
    Ok((rows_to_csv(&record.rows()).map_err(py_err)?, record_json(&record)?))
}

/// Seven-arm retain-source ablation; returns (results CSV, run record JSON).
#[pyfunction]
#[pyo3(signature = (overrides = vec![], config = None))]
fn ablate(py: Python<'_>, overrides: Vec<String>, config: Option<PathBuf>) -> PyResult<(String, String)> {
    let cfg = load_config(config, overrides)?;
    let record = py.detach(|| run_ablate(&cfg)).map_err(py_err)?;
    Ok((rows_to_csv(&record.rows()).map_err(py_err)?, record_json(&record)?))
}

/// The default configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

#[pymodule]
fn amulab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(gaussianize_losses, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(probit, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_mia, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_json, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
