//! Python bindings. Configuration is passed as TOML text using the same
//! schema as the CLI's `--config` file, so the two never drift apart.

use std::fs::File;
use std::io::BufReader;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use affinecal::backend::{simulate_task, Backend, MockBackend, MockModelSpec, SimulationConfig};
use affinecal::ensemble::{train_ensemble, EnsembleModel};
use affinecal::harness::{render_summary_table, run_experiment, Config, Dataset};
use affinecal::solver::{self, SolverMode};
use affinecal::surrogate::SurrogateDataset;
use affinecal::{CalibError, CalibrationParams, ClassParams, Exemplar, LabelSpace, LogitVector, ProbDist};

fn py_err(e: CalibError) -> PyErr {
    match e {
        CalibError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config_from(toml: Option<&str>) -> PyResult<Config> {
    match toml {
        Some(src) => Config::from_toml(src, "<config>").map_err(py_err),
        None => Ok(Config::default()),
    }
}

fn exemplars(items: Vec<(String, usize)>) -> Vec<Exemplar> {
    items
        .into_iter()
        .enumerate()
        .map(|(j, (text, label))| Exemplar::new(j.to_string(), text, label))
        .collect()
}

/// Log-odds of every class against class 0.
#[pyfunction]
fn logits_from_probs(probs: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = ProbDist::new(probs).map_err(py_err)?;
    Ok(affinecal::logits_from_probs(&p).into_vec())
}

#[pyfunction]
fn probs_from_logits(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    let m = LogitVector::new(logits).map_err(py_err)?;
    Ok(affinecal::probs_from_logits(&m).into_vec())
}

/// Applies `w_c * m_c + b_c` per non-reference class and renormalizes.
#[pyfunction]
fn calibrate(logits: Vec<f64>, biases: Vec<f64>, scales: Vec<f64>) -> PyResult<Vec<f64>> {
    if biases.len() != scales.len() {
        return Err(PyValueError::new_err("biases and scales differ in length"));
    }
    let classes = biases.iter().zip(&scales).map(|(&b, &w)| ClassParams::new(b, w)).collect();
    let theta = CalibrationParams::new(classes, 1).map_err(py_err)?;
    let m = LogitVector::new(logits).map_err(py_err)?;
    Ok(affinecal::calibrated_dist(&m, &theta).map_err(py_err)?.into_vec())
}

#[pyfunction]
fn tau_from_accuracy(accuracy: f64, num_labels: usize) -> f64 {
    solver::tau_from_accuracy(accuracy, num_labels)
}

/// Fits one context size from a surrogate TSV file and returns the fit as a dict.
#[pyfunction]
#[pyo3(signature = (path, config=None, tau=None, bias_only=false))]
fn fit_surrogate(
    py: Python<'_>,
    path: &str,
    config: Option<&str>,
    tau: Option<f64>,
    bias_only: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from(config)?;
    let mut ocfg = cfg.objective;
    ocfg.tau = tau.or(ocfg.tau);
    let mut scfg = cfg.solver;
    if bias_only {
        scfg.mode = SolverMode::BiasOnly;
    }
    let file = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
    let ds = SurrogateDataset::read_from(BufReader::new(file), path).map_err(py_err)?;
    let r = py.detach(|| solver::fit(&ds, &ocfg, &scfg)).map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    let params: Vec<(f64, f64)> = r.params.classes().iter().map(|c| (c.bias, c.scale)).collect();
    d.set_item("params", params)?;
    d.set_item("objective", r.objective_value)?;
    d.set_item("constraint", r.constraint_value)?;
    d.set_item("tau", r.tau)?;
    d.set_item("feasible", r.feasible)?;
    d.set_item("accuracy", r.in_sample_accuracy)?;
    d.set_item("base_accuracy", r.base_accuracy)?;
    Ok(d.into_any().unbind())
}

/// Synthetic biased classifier with a known ground-truth posterior.
#[pyclass(name = "MockModel", frozen)]
struct PyMockModel {
    inner: MockBackend,
}

#[pymethods]
impl PyMockModel {
    #[new]
    #[pyo3(signature = (true_slopes, true_intercepts=None, conditional_scale=None, marginal_shift=None,
                        majority_bias=0.0, recency_bias=0.0, noise_sd=0.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        true_slopes: Vec<f64>,
        true_intercepts: Option<Vec<f64>>,
        conditional_scale: Option<Vec<f64>>,
        marginal_shift: Option<Vec<f64>>,
        majority_bias: f64,
        recency_bias: f64,
        noise_sd: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let n = true_slopes.len();
        let spec = MockModelSpec {
            true_intercepts: true_intercepts.unwrap_or_else(|| vec![0.0; n]),
            conditional_scale: conditional_scale.unwrap_or_else(|| vec![1.0; n]),
            marginal_shift: marginal_shift.unwrap_or_else(|| vec![0.0; n]),
            true_slopes,
            majority_bias,
            recency_bias,
            noise_sd,
            seed,
        };
        Ok(Self { inner: MockBackend::new(spec).map_err(py_err)? })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec().num_classes()
    }

    /// Backend calls made so far.
    #[getter]
    fn calls(&self) -> usize {
        self.inner.calls()
    }

    /// Label distribution for `query` under an ordered context of (text, label) pairs.
    fn infer(&self, query: &str, context: Vec<(String, usize)>) -> PyResult<Vec<f64>> {
        let shots = exemplars(context);
        let refs: Vec<&Exemplar> = shots.iter().collect();
        Ok(self.inner.infer(query, &refs).map_err(py_err)?.into_vec())
    }

    fn true_posterior(&self, text: &str) -> Vec<f64> {
        self.inner.spec().true_posterior(text).into_vec()
    }

    /// Draws a labeled task as a list of (text, label).
    #[pyo3(signature = (num_items, seed=0))]
    fn simulate(&self, num_items: usize, seed: u64) -> PyResult<Vec<(String, usize)>> {
        let task = simulate_task(self.inner.spec(), &SimulationConfig::new(num_items, seed)).map_err(py_err)?;
        Ok(task.into_iter().map(|e| (e.text, e.label)).collect())
    }

    /// Runs the evaluation protocol on `items` and returns (csv, summary).
    #[pyo3(signature = (items, labels, config=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        items: Vec<(String, usize)>,
        labels: Vec<String>,
        config: Option<&str>,
    ) -> PyResult<(String, String)> {
        let cfg = config_from(config)?;
        let labels = LabelSpace::new(labels).map_err(py_err)?;
        let template = affinecal::backend::PromptTemplate::from_pattern("input: <x>\\noutput: <y>", labels)
            .map_err(py_err)?;
        let ds = Dataset::new("python", exemplars(items), template).map_err(py_err)?;
        let spec = cfg.experiment_spec();
        let report = py.detach(|| run_experiment(&ds, &self.inner, &spec)).map_err(py_err)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv).map_err(py_err)?;
        let csv = String::from_utf8(csv).expect("csv is utf-8");
        Ok((csv, render_summary_table(&report.summary)))
    }
}

/// Trained two-level ensemble of per-size affine maps.
#[pyclass(name = "Ensemble", frozen)]
struct PyEnsemble {
    inner: EnsembleModel,
}

#[pymethods]
impl PyEnsemble {
    /// Trains on `shots` (a list of (text, label)) using `model` as the backend.
    #[staticmethod]
    #[pyo3(signature = (shots, labels, model, config=None))]
    fn train(
        py: Python<'_>,
        shots: Vec<(String, usize)>,
        labels: Vec<String>,
        model: &PyMockModel,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = config_from(config)?;
        let labels = LabelSpace::new(labels).map_err(py_err)?;
        let shots = exemplars(shots);
        let inner = py
            .detach(|| train_ensemble(&shots, &labels, &model.inner, &cfg.ensemble, &cfg.objective, &cfg.solver))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: EnsembleModel::load(dir).map_err(py_err)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(py_err)
    }

    /// Context sizes that were fitted.
    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    /// (bias, scale) per non-reference class for context size `i`.
    fn params(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        let member = self
            .inner
            .members()
            .iter()
            .find(|m| m.context_size() == i)
            .ok_or_else(|| PyValueError::new_err(format!("no model for context size {i}")))?;
        Ok(member.fit.params.classes().iter().map(|c| (c.bias, c.scale)).collect())
    }

    fn predict(&self, py: Python<'_>, query: &str, model: &PyMockModel) -> PyResult<Vec<f64>> {
        let p = py.detach(|| self.inner.predict(query, &model.inner)).map_err(py_err)?;
        Ok(p.into_vec())
    }

    fn predict_label(&self, py: Python<'_>, query: &str, model: &PyMockModel) -> PyResult<usize> {
        py.detach(|| self.inner.predict_label(query, &model.inner)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Ensemble(k={}, sizes={:?})", self.inner.shots().len(), self.inner.sizes())
    }
}

#[pymodule]
fn affinecal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(logits_from_probs, m)?)?;
    m.add_function(wrap_pyfunction!(probs_from_logits, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(tau_from_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(fit_surrogate, m)?)?;
    m.add_class::<PyMockModel>()?;
    m.add_class::<PyEnsemble>()?;
    Ok(())
}
