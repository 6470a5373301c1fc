//! Python bindings: problems, solver configuration, the solver itself and
//! the evaluation metrics. Structured results cross the boundary as plain
//! dicts built from their JSON form.

use ebsa_core::ebsa::{self as solver, SolveReport};
use ebsa_core::metrics::{self, InfeaseOptions, ValueOptions};
use ebsa_core::problem::parse_problem_file;
use ebsa_core::{protocol, smoothing, BilevelProblem};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(ebsa, EbsaError, PyException, "Raised for any solver or problem error.");

fn err(e: ebsa_core::Error) -> PyErr {
    EbsaError::new_err(e.to_string())
}

/// Serializes through JSON into Python objects.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| EbsaError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A bilevel program: a corpus entry or a parsed problem file.
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    inner: BilevelProblem,
}

#[pymethods]
impl PyProblem {
    /// Looks up a built-in problem by name.
    #[staticmethod]
    fn corpus(name: &str) -> PyResult<Self> {
        ebsa_core::corpus_get(name).map(|inner| Self { inner }).map_err(err)
    }

    /// Parses the text of a `.bil` problem file.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_problem_file(text).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn description(&self) -> &str {
        self.inner.description()
    }

    /// `(d, l, m, p, q)`: upper and lower variables, lower inequalities,
    /// upper inequalities and upper equalities.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.d, d.l, d.m, d.p, d.q)
    }

    #[getter]
    fn default_start(&self) -> (Vec<f64>, Vec<f64>) {
        let (x, y) = self.inner.default_start();
        (x.to_vec(), y.to_vec())
    }

    /// Known solution as a dict, or None.
    #[getter]
    fn reference(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        match self.inner.reference() {
            Some(r) => to_py(py, r),
            None => Ok(py.None()),
        }
    }

    /// `(F, f)` at `(x, y)`.
    fn objectives(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
        let u = self.inner.eval_upper(&x, &y).map_err(err)?;
        let (f, _) = self.inner.eval_lower_value(&x, &y).map_err(err)?;
        Ok((u.obj, f))
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dims();
        format!("Problem('{}', d={}, l={}, m={}, p={}, q={})", self.inner.name(), d.d, d.l, d.m, d.p, d.q)
    }
}

/// Solver parameters. Keyword arguments override the defaults.
#[pyclass(name = "SolverConfig")]
struct PyConfig {
    inner: solver::SolverConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: solver::SolverConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_string())?;
            }
        }
        Ok(cfg)
    }

    /// Sets one parameter from its textual value and revalidates.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        solver::CONFIG_KEYS.to_vec()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }
}

/// Outcome of a solve. `report()` returns everything, per-pass history included.
#[pyclass(name = "SolveResult", frozen)]
struct PySolveResult {
    inner: SolveReport,
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn status(&self) -> &'static str {
        self.inner.status.as_str()
    }
    #[getter]
    fn converged(&self) -> bool {
        self.inner.status == solver::SolveStatus::ResConverged
    }
    #[getter]
    fn stop_rule(&self) -> Option<u8> {
        self.inner.stop_rule
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }
    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }
    #[getter]
    fn upper_obj(&self) -> f64 {
        self.inner.upper_obj
    }
    #[getter]
    fn lower_obj(&self) -> f64 {
        self.inner.lower_obj
    }
    #[getter]
    fn final_res(&self) -> f64 {
        self.inner.final_res
    }
    #[getter]
    fn res_history(&self) -> Vec<f64> {
        self.inner.res_history()
    }
    #[getter]
    fn events(&self) -> Vec<String> {
        self.inner.events.clone()
    }
    fn report(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }
    fn __repr__(&self) -> String {
        format!(
            "SolveResult('{}', status={}, iterations={}, F={:e})",
            self.inner.problem,
            self.inner.status.as_str(),
            self.inner.iterations,
            self.inner.upper_obj
        )
    }
}

#[pyfunction]
fn corpus_names() -> Vec<&'static str> {
    ebsa_core::corpus_names()
}

/// Runs the solver. Missing start components fall back to the problem's
/// default start.
#[pyfunction]
#[pyo3(signature = (problem, config=None, x0=None, y0=None))]
fn solve(
    py: Python<'_>,
    problem: &PyProblem,
    config: Option<&PyConfig>,
    x0: Option<Vec<f64>>,
    y0: Option<Vec<f64>>,
) -> PyResult<PySolveResult> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let (dx, dy) = problem.inner.default_start();
    let x0 = x0.unwrap_or_else(|| dx.to_vec());
    let y0 = y0.unwrap_or_else(|| dy.to_vec());
    let prob = &problem.inner;
    py.detach(|| solver::solve(prob, &cfg, &x0, &y0))
        .map(|inner| PySolveResult { inner })
        .map_err(err)
}

/// Infeasibility breakdown of `(x, y)` as a dict.
#[pyfunction]
#[pyo3(signature = (problem, x, y, threshold=0.1))]
fn infeasibility(py: Python<'_>, problem: &PyProblem, x: Vec<f64>, y: Vec<f64>, threshold: f64) -> PyResult<Py<PyAny>> {
    let opts = InfeaseOptions {
        threshold,
        ..InfeaseOptions::default()
    };
    let b = py.detach(|| metrics::infeasibility(&problem.inner, &x, &y, &opts)).map_err(err)?;
    to_py(py, &b)
}

/// Lower-level optimal value `V(x)`.
#[pyfunction]
fn value_function(py: Python<'_>, problem: &PyProblem, x: Vec<f64>) -> PyResult<f64> {
    py.detach(|| metrics::value_function(&problem.inner, &x, &ValueOptions::default())).map_err(err)
}

/// Grid-search solution of a small problem as a dict.
#[pyfunction]
#[pyo3(signature = (problem, resolution=1e-3))]
fn grid_oracle(py: Python<'_>, problem: &PyProblem, resolution: f64) -> PyResult<Py<PyAny>> {
    let sol = py.detach(|| metrics::grid_oracle(&problem.inner, resolution)).map_err(err)?;
    to_py(py, &sol)
}

/// `(R_F, R_f)` relative to reference values.
#[pyfunction]
fn ratios(upper_obj: f64, lower_obj: f64, upper_star: f64, lower_star: f64) -> (f64, f64) {
    metrics::ratios(upper_obj, lower_obj, upper_star, lower_star)
}

/// Smoothed slack and multiplier surrogates `(z, kappa)`.
#[pyfunction]
fn eval_zk(g: Vec<f64>, s: Vec<f64>, r: f64, rho: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    smoothing::eval_zk(&g, &s, r, rho).map(|zk| (zk.z, zk.kappa)).map_err(err)
}

#[pyfunction]
fn derive_seed(seed: u64, problem: &str, rep: usize) -> u64 {
    protocol::derive_seed(seed, problem, rep)
}

/// Seeded start near the problem's default start.
#[pyfunction]
#[pyo3(signature = (problem, seed, scale=protocol::START_SCALE))]
fn perturbed_start(problem: &PyProblem, seed: u64, scale: f64) -> (Vec<f64>, Vec<f64>) {
    protocol::perturbed_start(&problem.inner, seed, scale)
}

#[pymodule]
fn ebsa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EbsaError", m.py().get_type::<EbsaError>())?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySolveResult>()?;
    m.add_function(wrap_pyfunction!(corpus_names, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(infeasibility, m)?)?;
    m.add_function(wrap_pyfunction!(value_function, m)?)?;
    m.add_function(wrap_pyfunction!(grid_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(ratios, m)?)?;
    m.add_function(wrap_pyfunction!(eval_zk, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(perturbed_start, m)?)?;
    Ok(())
}
