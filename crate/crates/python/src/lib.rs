//! Python bindings for `langevin_gf`.
//!
//! States cross the boundary as `(p, q)` lists; step sizes, seeds and
//! test-function names are plain Python values.

use std::path::PathBuf;
use std::sync::Arc;

use langevin_gf::analysis::{self, ReferenceQuadrature, TestFunction};
use langevin_gf::cli::{self, Command, ExperimentConfig, Overrides};
use langevin_gf::genfun;
use langevin_gf::integrators::{self, Scheme};
use langevin_gf::mc::{self, GaussianIncrements, SeedPlan};
use langevin_gf::models::{self, DoubleWell, LinearOscillator, PhaseState, Quadratic};
use langevin_gf::{Error, LangevinModel};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Argument(_) | Error::Domain(_) | Error::Config(_) | Error::Range(_) | Error::StepSize { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn state(p: Vec<f64>, q: Vec<f64>) -> PyResult<PhaseState> {
    PhaseState::new(p, q).map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix must be a non-empty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn scheme(name: &str) -> PyResult<Scheme> {
    name.parse().map_err(to_py)
}

fn test_function(name: &str) -> PyResult<TestFunction> {
    name.parse().map_err(to_py)
}

/// A Langevin model `dP = -∇F dt - vP dt + Σ dW`, `dQ = MP dt`.
#[pyclass(name = "Model", module = "langevin_gf", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: LangevinModel,
}

#[pymethods]
impl PyModel {
    /// `dP = -aQ dt - vP dt - sigma dW`, `dQ = aP dt`.
    #[staticmethod]
    fn linear(a: f64, v: f64, sigma: f64) -> PyResult<Self> {
        Ok(PyModel { inner: LinearOscillator { a, v, sigma }.model().map_err(to_py)? })
    }

    /// `F(q) = (1 - q²)² - q/2` with unit mass and noise `sqrt(2v/beta)`.
    #[staticmethod]
    fn double_well(v: f64, beta: f64) -> PyResult<Self> {
        Ok(PyModel { inner: DoubleWell { v, beta }.model().map_err(to_py)? })
    }

    /// `F(q) = qᵀKq/2` with explicit mass and noise matrices.
    #[staticmethod]
    fn quadratic(stiffness: Vec<Vec<f64>>, mass: Vec<Vec<f64>>, v: f64, noise: Vec<Vec<f64>>) -> PyResult<Self> {
        let potential = Quadratic::new(matrix(stiffness)?).map_err(to_py)?;
        let inner = LangevinModel::new(Arc::new(potential), matrix(mass)?, v, matrix(noise)?).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    #[getter]
    fn friction(&self) -> f64 {
        self.inner.friction()
    }

    #[getter]
    fn mass(&self) -> Vec<Vec<f64>> {
        rows(self.inner.mass())
    }

    #[getter]
    fn noise(&self) -> Vec<Vec<f64>> {
        rows(self.inner.noise())
    }

    /// `(F(q), ∇F(q))`.
    fn potential(&self, q: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let e = models::eval_model(&self.inner, &q).map_err(to_py)?;
        Ok((e.potential, e.force))
    }

    fn lyapunov(&self, p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
        models::lyapunov_v(&self.inner, &state(p, q)?).map_err(to_py)
    }

    /// Unnormalized stationary density of the built-in models.
    fn gibbs_density(&self, p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
        models::gibbs_density(&self.inner, &state(p, q)?).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, noise_dim={}, friction={})", self.inner.dim(), self.inner.noise_dim(), self.inner.friction())
    }
}

type Pair = (Vec<f64>, Vec<f64>);

/// One step of the conformal symplectic scheme.
#[pyfunction]
fn gf2_step(model: &PyModel, p: Vec<f64>, q: Vec<f64>, h: f64, dw: Vec<f64>) -> PyResult<Pair> {
    let z = integrators::gf2_step(&model.inner, &state(p, q)?, h, &dw).map_err(to_py)?;
    Ok((z.p, z.q))
}

/// One Euler–Maruyama step.
#[pyfunction]
fn em_step(model: &PyModel, p: Vec<f64>, q: Vec<f64>, h: f64, dw: Vec<f64>) -> PyResult<Pair> {
    let z = integrators::em_step(&model.inner, &state(p, q)?, h, &dw).map_err(to_py)?;
    Ok((z.p, z.q))
}

/// The same step taken in augmented coordinates started at time `t`.
/// Returns the new state and the new time.
#[pyfunction]
fn gf2_step_augmented(model: &PyModel, p: Vec<f64>, q: Vec<f64>, t: f64, h: f64, dw: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let (z, t1) = genfun::gf2_step_via_augmented(&model.inner, &state(p, q)?, t, h, &dw).map_err(to_py)?;
    Ok((z.p, z.q, t1))
}

/// Jacobian of one step with respect to `(p, q)`, shape `2d × 2d`.
#[pyfunction]
#[pyo3(signature = (model, p, q, h, dw, eps=None))]
fn gf2_jacobian(model: &PyModel, p: Vec<f64>, q: Vec<f64>, h: f64, dw: Vec<f64>, eps: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let z = state(p, q)?;
    let j = match eps {
        None => integrators::gf2_jacobian(&model.inner, &z, h, &dw),
        Some(eps) => integrators::gf2_jacobian_fd(&model.inner, &z, h, &dw, eps),
    }
    .map_err(to_py)?;
    Ok(rows(&j))
}

/// `‖JᵀΩJ - e^{-vh}Ω‖∞`.
#[pyfunction]
fn conformal_defect(jacobian: Vec<Vec<f64>>, v: f64, h: f64) -> PyResult<f64> {
    analysis::conformal_defect(&matrix(jacobian)?, v, h).map_err(to_py)
}

/// A seeded trajectory; returns `(times, ps, qs)`.
#[pyfunction]
#[pyo3(signature = (model, p, q, h, n_steps, seed, scheme="gf2"))]
fn simulate(py: Python<'_>, model: &PyModel, p: Vec<f64>, q: Vec<f64>, h: f64, n_steps: usize, seed: u64, scheme: &str) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let z0 = state(p, q)?;
    let s = self::scheme(scheme)?;
    let traj = py
        .detach(|| {
            let mut noise = GaussianIncrements::new(seed, model.inner.noise_dim(), h);
            integrators::simulate(&model.inner, s, &z0, h, n_steps, &mut noise)
        })
        .map_err(to_py)?;
    let (ps, qs) = traj.states.into_iter().map(|z| (z.p, z.q)).unzip();
    Ok((traj.times, ps, qs))
}

/// Monte Carlo `E ψ(Z_N)`; returns `(mean, std_error)`.
#[pyfunction]
#[pyo3(signature = (model, psi, p, q, h, t_end, realizations, seed, scheme="gf2"))]
#[allow(clippy::too_many_arguments)]
fn mc_expectation(py: Python<'_>, model: &PyModel, psi: &str, p: Vec<f64>, q: Vec<f64>, h: f64, t_end: f64, realizations: u64, seed: u64, scheme: &str) -> PyResult<(f64, f64)> {
    let f = test_function(psi)?;
    let z0 = state(p, q)?;
    let s = self::scheme(scheme)?;
    let r = py
        .detach(|| mc::mc_expectation(&model.inner, s, &move |z: &PhaseState| f.eval(z), &z0, h, t_end, realizations, &SeedPlan::new(seed)))
        .map_err(to_py)?;
    Ok((r.mean, r.std_error))
}

/// Deterministic weak error `|E ψ(Z_N) - E ψ(Z(T))|` for a linear model.
#[pyfunction]
#[pyo3(signature = (model, psi, p, q, h, t_end, hermite_nodes=64))]
fn weak_error_linear(model: &PyModel, psi: &str, p: Vec<f64>, q: Vec<f64>, h: f64, t_end: f64, hermite_nodes: usize) -> PyResult<f64> {
    let f = test_function(psi)?;
    analysis::weak_error_linear(&model.inner, &move |z: &PhaseState| f.eval(z), &state(p, q)?, h, t_end, hermite_nodes).map_err(to_py)
}

/// Least-squares `(slope, intercept)` of `log error` against `log h`.
#[pyfunction]
fn fit_order(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    analysis::fit_order(&points).map_err(to_py)
}

/// Stationary expectation of `psi` under the Gibbs density, by tensor
/// Gauss–Legendre quadrature on `[lo, hi]²` (d = 1 only).
#[pyfunction]
#[pyo3(signature = (model, psi, lo=-10.0, hi=10.0, nodes=200))]
fn ergodic_reference(model: &PyModel, psi: &str, lo: f64, hi: f64, nodes: usize) -> PyResult<f64> {
    let f = test_function(psi)?;
    let quad = ReferenceQuadrature { lo, hi, nodes };
    analysis::ergodic_reference(&model.inner, &move |z: &PhaseState| f.eval(z), quad.lo, quad.hi, quad.nodes).map_err(to_py)
}

/// Runs a TOML experiment and returns the written CSV paths.
#[pyfunction]
#[pyo3(signature = (command, config, out=None, seed=None, realizations=None))]
fn run_experiment(py: Python<'_>, command: &str, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, realizations: Option<u64>) -> PyResult<Vec<PathBuf>> {
    let command: Command = command.parse().map_err(to_py)?;
    let mut cfg = ExperimentConfig::from_path(&config).map_err(to_py)?;
    cfg.apply(&Overrides { out, seed, realizations }).map_err(to_py)?;
    py.detach(|| cli::run(&cfg, command)).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "langevin_gf")]
fn langevin_gf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", cli::VERSION)?;
    m.add("TEST_FUNCTIONS", TestFunction::ALL.map(TestFunction::name).to_vec())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gf2_step, m)?)?;
    m.add_function(wrap_pyfunction!(em_step, m)?)?;
    m.add_function(wrap_pyfunction!(gf2_step_augmented, m)?)?;
    m.add_function(wrap_pyfunction!(gf2_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(conformal_defect, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(mc_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(weak_error_linear, m)?)?;
    m.add_function(wrap_pyfunction!(fit_order, m)?)?;
    m.add_function(wrap_pyfunction!(ergodic_reference, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
