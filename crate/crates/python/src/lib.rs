//! Python bindings. Vectors are lists of floats and matrices are lists of
//! rows.

use mkv_control::cli::{self, ProblemSpec};
use mkv_control::dmap;
use mkv_control::enkf::{self, TerminalNoise};
use mkv_control::horizon::{self, HorizonConfig};
use mkv_control::rng::Streams;
use mkv_control::scenarios;
use mkv_control::solver::{self, Backend, EpsSchedule};
use mkv_control::{stats, AffineControlSchedule, ControlProblem, EmpiricalMoments, Ensemble, Error};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Matrix = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn mat(rows: &Matrix) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[pyclass(name = "Problem", module = "mkv_control", frozen)]
struct PyProblem {
    inner: ControlProblem,
}

#[pymethods]
impl PyProblem {
    /// Built-in scenario by name.
    #[staticmethod]
    fn scenario(name: &str) -> PyResult<Self> {
        let sc = scenarios::find(name).map_err(to_py)?;
        Ok(Self {
            inner: (sc.problem)().map_err(to_py)?,
        })
    }

    /// Linear dynamics with quadratic costs.
    #[staticmethod]
    #[pyo3(signature = (drift_matrix, gain, noise, running_matrix, running_weight, terminal_matrix,
        terminal_weight, control_weight, horizon, start, drift_offset=None, running_offset=None,
        terminal_offset=None, initial_cov=None))]
    #[allow(clippy::too_many_arguments)]
    fn linear(
        drift_matrix: Matrix,
        gain: Matrix,
        noise: Matrix,
        running_matrix: Matrix,
        running_weight: Matrix,
        terminal_matrix: Matrix,
        terminal_weight: Matrix,
        control_weight: Matrix,
        horizon: f64,
        start: Vec<f64>,
        drift_offset: Option<Vec<f64>>,
        running_offset: Option<Vec<f64>>,
        terminal_offset: Option<Vec<f64>>,
        initial_cov: Option<Matrix>,
    ) -> PyResult<Self> {
        let spec = ProblemSpec {
            drift_matrix,
            drift_offset,
            gain,
            noise,
            running_matrix,
            running_offset,
            running_weight,
            terminal_matrix,
            terminal_offset,
            terminal_weight,
            control_weight,
            horizon,
            start,
            initial_cov,
        };
        Ok(Self {
            inner: spec.build().map_err(to_py)?,
        })
    }

    #[getter]
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    #[getter]
    fn dim_u(&self) -> usize {
        self.inner.dim_u()
    }
    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }
    #[getter]
    fn start(&self) -> Vec<f64> {
        vec_of(self.inner.start())
    }

    fn running_cost(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.running_cost(&DVector::from_vec(x)).map_err(to_py)
    }
    fn terminal_cost(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.terminal_cost(&DVector::from_vec(x)).map_err(to_py)
    }
    fn control_cost(&self, u: Vec<f64>) -> f64 {
        self.inner.control_cost(&DVector::from_vec(u))
    }
    fn drift(&self, x: Vec<f64>) -> Vec<f64> {
        vec_of(&self.inner.drift(&DVector::from_vec(x)))
    }

    /// `u = R Gᵀ (A_t x + c_t)` with the schedule entry active at `t`.
    fn apply_control(&self, schedule: &PySchedule, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .apply_control(&schedule.inner, t, &DVector::from_vec(x))
            .map(|u| vec_of(&u))
            .map_err(to_py)
    }
}

#[pyclass(name = "SolverConfig", module = "mkv_control", skip_from_py_object)]
#[derive(Clone)]
struct PySolverConfig {
    inner: solver::SolverConfig,
}

#[pymethods]
impl PySolverConfig {
    #[new]
    #[pyo3(signature = (dt=1e-3, ensemble_size=16, inflation=1e-6, backend="enkf", eps_dm=None, seed=0,
        record_every=1, terminal_noise="iid", eps_forward=(1.0, 1, 0.0), eps_reverse=(0.0, 0, 0.0)))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dt: f64,
        ensemble_size: usize,
        inflation: f64,
        backend: &str,
        eps_dm: Option<f64>,
        seed: u64,
        record_every: usize,
        terminal_noise: &str,
        eps_forward: (f64, usize, f64),
        eps_reverse: (f64, usize, f64),
    ) -> PyResult<Self> {
        let inner = solver::SolverConfig {
            dt,
            ensemble_size,
            inflation,
            backend: backend.parse::<Backend>().map_err(to_py)?,
            eps_dm,
            seed,
            record_every,
            terminal_noise: terminal_noise.parse::<TerminalNoise>().map_err(to_py)?,
            eps_forward: EpsSchedule::first_steps(eps_forward.1, eps_forward.0, eps_forward.2),
            eps_reverse: EpsSchedule::first_steps(eps_reverse.1, eps_reverse.0, eps_reverse.2),
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Default settings of a built-in scenario.
    #[staticmethod]
    fn for_scenario(name: &str) -> PyResult<Self> {
        let sc = scenarios::find(name).map_err(to_py)?;
        Ok(Self { inner: (sc.config)() })
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }
    #[setter]
    fn set_dt(&mut self, v: f64) {
        self.inner.dt = v;
    }
    #[getter]
    fn ensemble_size(&self) -> usize {
        self.inner.ensemble_size
    }
    #[setter]
    fn set_ensemble_size(&mut self, v: usize) {
        self.inner.ensemble_size = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn inflation(&self) -> f64 {
        self.inner.inflation
    }
    #[setter]
    fn set_inflation(&mut self, v: f64) {
        self.inner.inflation = v;
    }
    #[getter]
    fn backend(&self) -> String {
        self.inner.backend.to_string()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Schedule", module = "mkv_control", frozen)]
struct PySchedule {
    inner: AffineControlSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(times: Vec<f64>, gains: Vec<Matrix>, shifts: Vec<Vec<f64>>) -> PyResult<Self> {
        let gains = gains.iter().map(mat).collect::<PyResult<Vec<_>>>()?;
        let shifts = shifts.into_iter().map(DVector::from_vec).collect();
        Ok(Self {
            inner: AffineControlSchedule::new(times, gains, shifts).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(times: Vec<f64>, dim_x: usize) -> PyResult<Self> {
        Ok(Self {
            inner: AffineControlSchedule::zeros(times, dim_x).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: cli::read_control_csv(text).map_err(to_py)?,
        })
    }

    fn to_csv(&self) -> String {
        cli::control_csv(&self.inner)
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }
    #[getter]
    fn gains(&self) -> Vec<Matrix> {
        self.inner.gains().iter().map(rows).collect()
    }
    #[getter]
    fn shifts(&self) -> Vec<Vec<f64>> {
        self.inner.shifts().iter().map(vec_of).collect()
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn moments_lists(ms: &[EmpiricalMoments]) -> (Vec<Vec<f64>>, Vec<Matrix>) {
    (ms.iter().map(|m| vec_of(m.mean())).collect(), ms.iter().map(|m| rows(m.cov())).collect())
}

/// Forward sweep, terminal update and reverse sweep. Returns the schedule
/// and a dict with per-step moments and diagnostics.
#[pyfunction]
fn solve<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    config: &PySolverConfig,
) -> PyResult<(PySchedule, Bound<'py, PyDict>)> {
    let sol = py
        .detach(|| solver::solve(&problem.inner, &config.inner))
        .map_err(to_py)?;
    let rec = &sol.record;
    let out = PyDict::new(py);
    out.set_item("times", rec.times.clone())?;
    let (m, c) = moments_lists(&rec.bar);
    out.set_item("forward_mean", m)?;
    out.set_item("forward_cov", c)?;
    let (m, c) = moments_lists(&rec.tilde);
    out.set_item("reverse_mean", m)?;
    out.set_item("reverse_cov", c)?;
    let d = &rec.diagnostics;
    out.set_item("kernels_built", d.kernels_built)?;
    out.set_item("max_sinkhorn_residual", d.max_row_residual.max(d.max_col_residual))?;
    out.set_item("hull_checks", d.hull_checks)?;
    Ok((PySchedule { inner: sol.schedule }, out))
}

/// Paths of the controlled SDE as `(times, states, controls)` tuples.
#[pyfunction]
#[pyo3(signature = (problem, schedule, n_paths=1, rho=None, seed=0))]
#[allow(clippy::type_complexity)]
fn simulate(
    py: Python<'_>,
    problem: &PyProblem,
    schedule: &PySchedule,
    n_paths: usize,
    rho: Option<f64>,
    seed: u64,
) -> PyResult<Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
    let paths = py
        .detach(|| solver::simulate_controlled(&problem.inner, &schedule.inner, rho, n_paths, &Streams::new(seed)))
        .map_err(to_py)?;
    Ok(paths
        .into_iter()
        .map(|t| (t.times, t.states.iter().map(vec_of).collect(), t.controls.iter().map(vec_of).collect()))
        .collect())
}

/// Monte-Carlo cost estimate `(mean, standard error)`.
#[pyfunction]
#[pyo3(signature = (problem, schedule, n_paths, rho=None, seed=0))]
fn estimate_cost(
    py: Python<'_>,
    problem: &PyProblem,
    schedule: &PySchedule,
    n_paths: usize,
    rho: Option<f64>,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let est = py
        .detach(|| solver::estimate_cost(&problem.inner, &schedule.inner, rho, n_paths, &Streams::new(seed)))
        .map_err(to_py)?;
    Ok((est.mean, est.std_error))
}

/// Mean and inflated covariance of particles given as a list of points.
#[pyfunction]
#[pyo3(signature = (particles, inflation=0.0))]
fn moments(particles: Vec<Vec<f64>>, inflation: f64) -> PyResult<(Vec<f64>, Matrix)> {
    let cols: Vec<_> = particles.into_iter().map(DVector::from_vec).collect();
    let e = Ensemble::from_particles(&cols, 0.0).map_err(to_py)?;
    let m = stats::moments(&e, inflation).map_err(to_py)?;
    Ok((vec_of(m.mean()), rows(m.cov())))
}

/// Symmetric Sinkhorn scaling: `(v, iterations, row residual)`.
#[pyfunction]
#[pyo3(signature = (kernel, tol=dmap::SINKHORN_TOL, max_iter=dmap::SINKHORN_MAX_ITER))]
fn sinkhorn(kernel: Matrix, tol: f64, max_iter: usize) -> PyResult<(Vec<f64>, usize, f64)> {
    let s = dmap::sinkhorn(&mat(&kernel)?, tol, max_iter).map_err(to_py)?;
    Ok((vec_of(&s.scaling), s.iterations, s.row_residual))
}

/// Gain `(A, c)` from forward and reverse moments.
#[pyfunction]
fn gain_from_moments(
    mean_bar: Vec<f64>,
    cov_bar: Matrix,
    mean_tilde: Vec<f64>,
    cov_tilde: Matrix,
) -> PyResult<(Matrix, Vec<f64>)> {
    let bar = EmpiricalMoments::from_parts(DVector::from_vec(mean_bar), mat(&cov_bar)?, 0.0).map_err(to_py)?;
    let tilde = EmpiricalMoments::from_parts(DVector::from_vec(mean_tilde), mat(&cov_tilde)?, 0.0).map_err(to_py)?;
    let g = enkf::gain_from_moments(&bar, &tilde).map_err(to_py)?;
    Ok((rows(&g.a), vec_of(&g.c)))
}

/// Discounted infinite-horizon gain `(A_eq, c_eq)`.
#[pyfunction]
#[pyo3(signature = (problem, gamma, config, equilibrium_tol=1e-6, max_time=1e3))]
fn stationary_solve(
    py: Python<'_>,
    problem: &PyProblem,
    gamma: f64,
    config: &PySolverConfig,
    equilibrium_tol: f64,
    max_time: f64,
) -> PyResult<(Matrix, Vec<f64>)> {
    let cfg = HorizonConfig {
        gamma,
        equilibrium_tol,
        max_time,
        base: config.inner.clone(),
    };
    let sol = py.detach(|| horizon::stationary_solve(&problem.inner, &cfg)).map_err(to_py)?;
    Ok((rows(&sol.gain.a), vec_of(&sol.gain.c)))
}

#[pyfunction]
fn scenario_names() -> Vec<&'static str> {
    scenarios::ALL.iter().map(|s| s.name).collect()
}

#[pymodule]
#[pyo3(name = "mkv_control")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolverConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cost, m)?)?;
    m.add_function(wrap_pyfunction!(moments, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(gain_from_moments, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_solve, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    Ok(())
}
