//! Python bindings. Matrices cross the boundary as lists of row lists, so
//! numpy arrays are accepted too; configs are dicts of overrides.

use std::path::{Path, PathBuf};

use gmcr::baselines::{mcr_als_fit, nmf_fit, nnls_concentrations, FactorPair};
use gmcr::decontam::{clean, fit_clean_process, pollution_channels_report, Manifest, RunLabel, WindowPlan};
use gmcr::optimizer::{evaluate_model, train, TrainOutcome};
use gmcr::synth::{generate, SynthConfig};
use gmcr::{GmcrError, HyperParams, Matrix, ModelConfig, Rng, SolverCheckpoint};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn py_err(e: GmcrError) -> PyErr {
    match e {
        GmcrError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let nrows = rows.len();
    Matrix::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: Value, at: &str) -> PyResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown key {at}{k}")))?;
                merge(slot, v, &format!("{at}{k}."))?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn with_overrides<T: Serialize + DeserializeOwned>(
    py: Python<'_>,
    base: T,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    let Some(o) = overrides else { return Ok(base) };
    let text: String = py.import("json")?.call_method1("dumps", (o,))?.extract()?;
    let patch: Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut value = serde_json::to_value(&base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    merge(&mut value, patch, "")?;
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn resolve_train(
    py: Python<'_>,
    d: usize,
    model: Option<&Bound<'_, PyDict>>,
    hyper: Option<&Bound<'_, PyDict>>,
    seed: u64,
) -> PyResult<(ModelConfig, HyperParams)> {
    let model = with_overrides(py, ModelConfig::default(), model)?;
    let mut hp = with_overrides(py, HyperParams::for_dim(d), hyper)?;
    hp.seed = seed;
    Ok((model, hp))
}

/// A trained solver snapshot.
#[pyclass(name = "Checkpoint", module = "gmcr_py", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: SolverCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        SolverCheckpoint::load(&path)
            .map(|inner| PyCheckpoint { inner })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration
    }

    #[getter]
    fn r2(&self) -> Option<f64> {
        self.inner.r2
    }

    #[getter]
    fn ec(&self) -> usize {
        self.inner.ec
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.model.budget()
    }

    /// Hardened components of the model pruned on `data`.
    fn components(&self, data: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let pruned = self.inner.pruned_model(&to_matrix(data)?).map_err(py_err)?;
        Ok(to_rows(&pruned.dictionary.effective_components()))
    }

    fn concentrations(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let c = self
            .inner
            .model
            .predict_concentrations(&to_matrix(x)?)
            .map_err(py_err)?;
        Ok(to_rows(&c))
    }

    fn selection_probabilities(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = self
            .inner
            .model
            .selection_probabilities(&to_matrix(x)?)
            .map_err(py_err)?;
        Ok(to_rows(&p))
    }

    /// Hardened reconstruction by the model pruned on `x`.
    fn reconstruct(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(x)?;
        let pruned = self.inner.pruned_model(&x).map_err(py_err)?;
        Ok(to_rows(&pruned.reconstruct(&x).map_err(py_err)?))
    }

    /// `(r2, ec)` on `data`; `r2` is None when undefined.
    fn evaluate(&self, data: Vec<Vec<f64>>) -> PyResult<(Option<f64>, usize)> {
        evaluate_model(&self.inner.model, &to_matrix(data)?, self.inner.hyper.tau_use).map_err(py_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let r2 = self.inner.r2.map_or_else(|| "None".to_string(), |v| v.to_string());
        format!(
            "Checkpoint(iteration={}, ec={}, r2={r2})",
            self.inner.iteration, self.inner.ec
        )
    }
}

/// Result of a training run.
#[pyclass(name = "FitResult", module = "gmcr_py", skip_from_py_object)]
struct PyFitResult {
    inner: TrainOutcome,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn best(&self) -> Option<PyCheckpoint> {
        self.inner.best_checkpoint().map(|c| PyCheckpoint { inner: c.clone() })
    }

    #[getter]
    fn checkpoints(&self) -> Vec<PyCheckpoint> {
        self.inner
            .checkpoints
            .iter()
            .map(|c| PyCheckpoint { inner: c.clone() })
            .collect()
    }

    #[getter]
    fn diverged(&self) -> bool {
        self.inner.diverged
    }

    /// `(iteration, ec, r2)` per checkpoint.
    fn curve(&self) -> Vec<(usize, usize, Option<f64>)> {
        self.inner
            .checkpoints
            .iter()
            .map(|c| (c.iteration, c.ec, c.r2))
            .collect()
    }

    /// Per-iteration loss terms as dicts.
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.trace)
    }
}

/// Generates a synthetic benchmark. Returns a dict of matrices.
#[pyfunction]
#[pyo3(signature = (config=None, seed=0))]
fn synth<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = with_overrides(py, SynthConfig::default(), config)?;
    cfg.seed = seed;
    let truth = py.detach(|| generate(&cfg)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mixtures", to_rows(&truth.x_noisy))?;
    out.set_item("clean", to_rows(&truth.x_clean))?;
    out.set_item("s_true", to_rows(&truth.s_true))?;
    out.set_item("c_true", to_rows(&truth.c_true))?;
    out.set_item("delta_true", to_rows(&truth.delta_true))?;
    out.set_item("config", to_py(py, &cfg)?)?;
    Ok(out)
}

/// Trains a solver on `data` (mixtures as rows).
#[pyfunction]
#[pyo3(signature = (data, model=None, hyper=None, seed=0))]
fn fit(
    py: Python<'_>,
    data: Vec<Vec<f64>>,
    model: Option<&Bound<'_, PyDict>>,
    hyper: Option<&Bound<'_, PyDict>>,
    seed: u64,
) -> PyResult<PyFitResult> {
    let x = to_matrix(data)?;
    let (model, hp) = resolve_train(py, x.ncols(), model, hyper, seed)?;
    let inner = py.detach(|| train(&x, &model, &hp)).map_err(py_err)?;
    Ok(PyFitResult { inner })
}

type Rows = Vec<Vec<f64>>;

fn factors(f: FactorPair) -> (Rows, Rows) {
    (to_rows(&f.c_hat), to_rows(&f.s_hat))
}

/// Lee-Seung NMF. Returns `(C, S)` with unit-norm rows of `S`.
#[pyfunction]
#[pyo3(signature = (data, rank, iters=2000, seed=0))]
fn nmf(py: Python<'_>, data: Vec<Vec<f64>>, rank: usize, iters: usize, seed: u64) -> PyResult<(Rows, Rows)> {
    let x = to_matrix(data)?;
    let f = py
        .detach(|| nmf_fit(&x, rank, iters, &mut Rng::new(seed, 0)))
        .map_err(py_err)?;
    Ok(factors(f))
}

/// Non-negative alternating least squares. Returns `(C, S)`.
#[pyfunction]
#[pyo3(signature = (data, rank, iters=200, seed=0))]
fn mcr_als(py: Python<'_>, data: Vec<Vec<f64>>, rank: usize, iters: usize, seed: u64) -> PyResult<(Rows, Rows)> {
    let x = to_matrix(data)?;
    let f = py
        .detach(|| mcr_als_fit(&x, rank, iters, &mut Rng::new(seed, 0)))
        .map_err(py_err)?;
    Ok(factors(f))
}

/// Non-negative concentrations of `data` against fixed components.
#[pyfunction]
fn concentrations(data: Vec<Vec<f64>>, components: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = nnls_concentrations(&to_matrix(data)?, &to_matrix(components)?).map_err(py_err)?;
    Ok(to_rows(&c))
}

#[pyfunction]
fn r_squared(truth: Vec<Vec<f64>>, pred: Vec<Vec<f64>>) -> PyResult<f64> {
    gmcr::metrics::r_squared(&to_matrix(truth)?, &to_matrix(pred)?).map_err(py_err)
}

/// Mean mass on true zeros after matching estimated to true components.
#[pyfunction]
fn zero_leakage(s_hat: Vec<Vec<f64>>, s_true: Vec<Vec<f64>>) -> PyResult<f64> {
    gmcr::baselines::zero_leakage(&to_matrix(s_hat)?, &to_matrix(s_true)?).map_err(py_err)
}

/// Fits window solvers on the clean runs of `manifest` and cleans every
/// other run into `out/<run stem>/`. Returns per-run channel reductions.
#[pyfunction]
#[pyo3(signature = (manifest, out, window_seconds=60.0, channels=None, model=None, hyper=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn clean_manifest<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out: PathBuf,
    window_seconds: f64,
    channels: Option<Vec<u32>>,
    model: Option<&Bound<'py, PyDict>>,
    hyper: Option<&Bound<'py, PyDict>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = Manifest::load(&manifest).map_err(py_err)?;
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let runs = m.read_runs(&base).map_err(py_err)?;
    let clean_runs: Vec<_> = runs.iter().filter(|r| r.label == RunLabel::Clean).cloned().collect();
    let first = clean_runs
        .first()
        .ok_or_else(|| PyValueError::new_err("manifest lists no clean runs"))?;
    let (model, hp) = resolve_train(py, first.mz.len(), model, hyper, seed)?;
    let plan = WindowPlan::for_runs(&runs, window_seconds).map_err(py_err)?;
    let solvers = py
        .detach(|| fit_clean_process(&clean_runs, &plan, &model, &hp))
        .map_err(py_err)?;
    let channels = channels.unwrap_or_default();
    let report = PyDict::new(py);
    for (entry, run) in m.runs.iter().zip(&runs) {
        if run.label == RunLabel::Clean {
            continue;
        }
        let stem = entry
            .path
            .file_stem()
            .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
        let result = clean(run, &plan, &solvers).map_err(py_err)?;
        result.write(&out.join(&stem)).map_err(py_err)?;
        let rows = pollution_channels_report(&result, &channels).map_err(py_err)?;
        report.set_item(stem, to_py(py, &rows)?)?;
    }
    Ok(report)
}

#[pymodule]
fn gmcr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(nmf, m)?)?;
    m.add_function(wrap_pyfunction!(mcr_als, m)?)?;
    m.add_function(wrap_pyfunction!(concentrations, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(zero_leakage, m)?)?;
    m.add_function(wrap_pyfunction!(clean_manifest, m)?)?;
    Ok(())
}
