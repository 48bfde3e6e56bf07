//! Python bindings for the penalized obstacle mean-field-game solver.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use obstacle_mfg::cli::{apply_overrides, parse_config, run, Overrides};
use obstacle_mfg::continuation::{self, EpsilonSchedule};
use obstacle_mfg::diagnostics;
use obstacle_mfg::model::{self, eval_hamiltonian, ModelSpec, PenalizationSpec};
use obstacle_mfg::penalized::{self, SolverOptions};
use obstacle_mfg::{Error, GridField, PeriodicGrid};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Domain(_) | Error::Validation(_) | Error::GridMismatch(_) | Error::Config { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| to_py(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn options(json: Option<&str>) -> PyResult<SolverOptions> {
    let opts: SolverOptions = match json {
        Some(text) => serde_json::from_str(text).map_err(|e| to_py(e.into()))?,
        None => SolverOptions::default(),
    };
    opts.validate().map_err(to_py)?;
    Ok(opts)
}

fn initial_field(grid: &PeriodicGrid, values: Option<Vec<f64>>) -> PyResult<GridField> {
    match values {
        Some(v) => GridField::new(grid.clone(), v).map_err(to_py),
        None => Ok(GridField::constant(grid, 0.0)),
    }
}

/// Model data: Hamiltonian with trigonometric potential and a coupling.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelSpec,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelSpec = serde_json::from_str(text).map_err(|e| to_py(e.into()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// `V(x) = amplitude * cos(2 pi x_1)` with logarithmic coupling.
    #[staticmethod]
    fn cosine(dims: usize, amplitude: f64, offset: f64) -> PyResult<Self> {
        let inner = ModelSpec::cosine(dims, amplitude, offset);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn constant(dims: usize, offset: f64) -> PyResult<Self> {
        let inner = ModelSpec::constant(dims, offset);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims
    }

    fn hamiltonian(&self, p: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        Ok(eval_hamiltonian(&self.inner.hamiltonian, &p, &x).map_err(to_py)?.value)
    }

    /// Returns `(g(theta), g'(theta))`.
    fn coupling(&self, theta: f64) -> PyResult<(f64, f64)> {
        model::eval_coupling(&self.inner.coupling, theta).map_err(to_py)
    }

    fn invert_coupling(&self, y: f64) -> PyResult<f64> {
        model::invert_coupling(&self.inner.coupling, y).map_err(to_py)
    }

    #[pyo3(signature = (samples = 2000, seed = 0))]
    fn check_assumptions<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let report = model::check_assumptions(&self.inner, samples, seed).map_err(to_py)?;
        to_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// Converged iterate of the penalized system at one epsilon.
#[pyclass(name = "PenalizedSolution", frozen)]
struct PySolution {
    inner: penalized::PenalizedSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.u.grid.sizes().to_vec()
    }

    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.u.values.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.values.clone()
    }

    #[getter]
    fn residual_norm(&self) -> f64 {
        self.inner.residual_norm
    }

    #[getter]
    fn newton_iterations(&self) -> usize {
        self.inner.newton_iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "PenalizedSolution(epsilon={}, sizes={:?}, residual_norm={:.3e}, iterations={})",
            self.inner.epsilon,
            self.inner.u.grid.sizes(),
            self.inner.residual_norm,
            self.inner.newton_iterations
        )
    }
}

/// Result of an epsilon continuation.
#[pyclass(name = "LimitSolution", frozen)]
struct PyLimit {
    inner: continuation::LimitSolution,
}

#[pymethods]
impl PyLimit {
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.u.values.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.values.clone()
    }

    #[getter]
    fn contact_tolerance(&self) -> f64 {
        self.inner.contact_tolerance
    }

    #[getter]
    fn contact_set(&self) -> Vec<bool> {
        self.inner.contact_set.clone()
    }

    #[getter]
    fn contact_measure(&self) -> f64 {
        self.inner.contact_measure()
    }

    #[getter]
    fn residuals<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.residuals)
    }

    #[getter]
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.schedule_trace)
    }

    #[getter]
    fn estimates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.estimates)
    }

    #[getter]
    fn solutions(&self) -> Vec<PySolution> {
        self.inner.solutions.iter().map(|s| PySolution { inner: s.clone() }).collect()
    }

    fn final_solution(&self) -> PySolution {
        PySolution { inner: self.inner.final_solution().clone() }
    }
}

#[pyfunction]
fn alpha_max(dims: usize) -> PyResult<f64> {
    model::alpha_max(dims).map_err(to_py)
}

/// Returns `(beta(s), beta'(s))` for the penalty at `epsilon`.
#[pyfunction]
fn penalization(epsilon: f64, s: f64) -> PyResult<(f64, f64)> {
    let spec = PenalizationSpec::new(epsilon).map_err(to_py)?;
    model::eval_penalization(&spec, s).map_err(to_py)
}

/// Newton solve of the penalized system on a periodic grid.
#[pyfunction]
#[pyo3(signature = (model, sizes, epsilon, u_init = None, options = None))]
fn solve_penalized(
    py: Python<'_>,
    model: &PyModel,
    sizes: Vec<usize>,
    epsilon: f64,
    u_init: Option<Vec<f64>>,
    options: Option<&str>,
) -> PyResult<PySolution> {
    let grid = PeriodicGrid::new(&sizes).map_err(to_py)?;
    let start = initial_field(&grid, u_init)?;
    let opts = self::options(options)?;
    let spec = model.inner.clone();
    let inner = py.detach(|| penalized::newton_solve(&spec, epsilon, &start, &opts)).map_err(to_py)?;
    Ok(PySolution { inner })
}

/// Drives epsilon down a geometric schedule, warm-starting each solve.
#[pyfunction]
#[pyo3(signature = (model, sizes, start = 0.2, factor = 0.5, steps = 6, seed = 0, options = None))]
#[allow(clippy::too_many_arguments)]
fn run_continuation(
    py: Python<'_>,
    model: &PyModel,
    sizes: Vec<usize>,
    start: f64,
    factor: f64,
    steps: usize,
    seed: u64,
    options: Option<&str>,
) -> PyResult<PyLimit> {
    let grid = PeriodicGrid::new(&sizes).map_err(to_py)?;
    let schedule = EpsilonSchedule { start, factor, steps };
    let opts = self::options(options)?;
    let spec = model.inner.clone();
    let inner = py
        .detach(|| continuation::run_continuation(&spec, &grid, &schedule, &opts, seed))
        .map_err(to_py)?;
    Ok(PyLimit { inner })
}

#[pyfunction]
fn estimate_report<'py>(py: Python<'py>, model: &PyModel, solution: &PySolution) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &diagnostics::estimate_report(&model.inner, &solution.inner))
}

#[pyfunction]
fn energy_identity_gap(model: &PyModel, solution: &PySolution) -> f64 {
    diagnostics::energy_identity_gap(&model.inner, &solution.inner)
}

#[pyfunction]
fn uniqueness_gap<'py>(
    py: Python<'py>,
    model: &PyModel,
    first: &PySolution,
    second: &PySolution,
) -> PyResult<Bound<'py, PyAny>> {
    let gap = diagnostics::uniqueness_gap(&model.inner, &first.inner, &second.inner).map_err(to_py)?;
    to_dict(py, &gap)
}

/// Runs a JSON run configuration as the command-line tool would; returns the exit code.
#[pyfunction]
#[pyo3(signature = (config, output_dir = None, quiet = true))]
fn run_config(py: Python<'_>, config: &str, output_dir: Option<PathBuf>, quiet: bool) -> PyResult<i32> {
    let parsed = parse_config(config).map_err(to_py)?;
    let overrides = Overrides { output_dir, ..Default::default() };
    let resolved = apply_overrides(parsed, &overrides).map_err(to_py)?;
    let outcome = py.detach(|| run(&resolved, quiet)).map_err(to_py)?;
    Ok(outcome.exit_code())
}

#[pymodule]
fn obstacle_mfg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyLimit>()?;
    m.add_function(wrap_pyfunction!(alpha_max, m)?)?;
    m.add_function(wrap_pyfunction!(penalization, m)?)?;
    m.add_function(wrap_pyfunction!(solve_penalized, m)?)?;
    m.add_function(wrap_pyfunction!(run_continuation, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_report, m)?)?;
    m.add_function(wrap_pyfunction!(energy_identity_gap, m)?)?;
    m.add_function(wrap_pyfunction!(uniqueness_gap, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
