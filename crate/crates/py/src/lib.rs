//! Python bindings: kernels, the linear mean-field model, particle
//! simulation, the deterministic limit, rate functionals and the experiment
//! harness.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vmv_core::deviations::{
    ldp_rate, mdp_rate, minimize_rate_endpoint, EndpointOptions, Halfspace, LdpSolver, RateMode,
    RateProblem, RateSolution,
};
use vmv_core::harness::{self, ModelRegistry};
use vmv_core::kernels::{
    default_steps, regularity_probe as probe, resolvent as grid_resolvent, ResolventMethod,
};
use vmv_core::measures::wasserstein2 as w2;
use vmv_core::volterra::{
    simulate_particles, solve_controlled_deterministic, solve_deterministic_limit, ControlledMode,
    Initializer, LimitMethod, SimulationOptions,
};
use vmv_core::{
    Coefficients, ControlPath, EmpiricalMeasure, Grid, GridKernel, GridPath, Kernel,
    LinearMeanField, PathEnsemble, Scheme, VolterraModel,
};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "Kernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: Kernel,
}

#[pymethods]
impl PyKernel {
    #[staticmethod]
    fn constant(c: f64) -> Self {
        Self {
            inner: Kernel::constant(c),
        }
    }

    #[staticmethod]
    fn power(hurst: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Kernel::power(hurst).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn fbm(hurst: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Kernel::fbm(hurst).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn riemann_liouville(alpha: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Kernel::riemann_liouville(alpha).map_err(value_err)?,
        })
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            inner: self.inner.clone().scaled(factor),
        }
    }

    fn eval(&self, t: f64, s: f64) -> PyResult<f64> {
        self.inner.eval(t, s).map_err(value_err)
    }

    /// `∫_a^b K(t, s)^power ds`.
    #[pyo3(signature = (t, a, b, power = 1))]
    fn integrate(&self, t: f64, a: f64, b: f64, power: u32) -> PyResult<f64> {
        self.inner.integrate(t, a, b, power).map_err(value_err)
    }

    /// Hölder-type exponent estimate `(gamma, fit_residual)`.
    #[pyo3(signature = (t, horizon, steps = None))]
    fn regularity(&self, t: f64, horizon: f64, steps: Option<Vec<f64>>) -> PyResult<(f64, f64)> {
        let steps = steps.unwrap_or_else(default_steps);
        let est = probe(&self.inner, t, &steps, horizon).map_err(value_err)?;
        Ok((est.gamma, est.fit_residual))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Resolvent of `K` on a uniform grid, as rows `R[i][j]`, `j < i`.
#[pyfunction]
#[pyo3(signature = (kernel, horizon, n_steps, method = "direct"))]
fn resolvent(
    kernel: &PyKernel,
    horizon: f64,
    n_steps: usize,
    method: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let grid = Grid::new(horizon, n_steps).map_err(value_err)?;
    let k = GridKernel::from_kernel(&kernel.inner, grid).map_err(value_err)?;
    let method = match method {
        "direct" => ResolventMethod::Direct,
        "series" => ResolventMethod::default(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method '{other}' (direct, series)"
            )))
        }
    };
    let r = grid_resolvent(&k, method).map_err(runtime_err)?;
    Ok((0..=n_steps).map(|i| r.row(i).to_vec()).collect())
}

#[pyclass(name = "LinearMeanField", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLinearMeanField {
    inner: LinearMeanField,
}

#[pymethods]
impl PyLinearMeanField {
    /// `b = A x + B mean(μ)`, `σ = σ0 + σ1 · x`, row-major flat lists.
    #[new]
    #[pyo3(signature = (d, m, a, b, sigma0, sigma1 = None))]
    fn new(
        d: usize,
        m: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        sigma0: Vec<f64>,
        sigma1: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: LinearMeanField::new(d, m, a, b, sigma0, sigma1).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn scalar(a: f64, b: f64, sigma0: f64) -> Self {
        Self {
            inner: LinearMeanField::scalar(a, b, sigma0),
        }
    }

    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }
}

/// A model discretized on a uniform grid.
#[pyclass(name = "Scheme", frozen)]
struct PyScheme {
    inner: Scheme,
}

#[pymethods]
impl PyScheme {
    #[new]
    #[pyo3(signature = (k1, k2, coeffs, horizon, n_steps, kc = None))]
    fn new(
        k1: &PyKernel,
        k2: &PyKernel,
        coeffs: &PyLinearMeanField,
        horizon: f64,
        n_steps: usize,
        kc: Option<&PyKernel>,
    ) -> PyResult<Self> {
        let mut model = VolterraModel::new(
            k1.inner.clone(),
            k2.inner.clone(),
            Arc::new(coeffs.inner.clone()),
        );
        if let Some(kc) = kc {
            model = model.with_control_kernel(kc.inner.clone());
        }
        let grid = Grid::new(horizon, n_steps).map_err(value_err)?;
        Ok(Self {
            inner: Scheme::new(&model, grid).map_err(value_err)?,
        })
    }

    fn times(&self) -> Vec<f64> {
        self.inner.grid().times()
    }

    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    /// Deterministic limit path, one row per grid node.
    fn limit(&self, xi: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let sol = solve_deterministic_limit(&self.inner, &xi, LimitMethod::Stepping)
            .map_err(runtime_err)?;
        Ok(rows(&sol.path))
    }

    /// Skeleton driven by a control given per grid cell.
    #[pyo3(signature = (xi, control, mode = "ldp"))]
    fn skeleton(
        &self,
        xi: Vec<f64>,
        control: Vec<Vec<f64>>,
        mode: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mode = rate_mode(mode)?;
        let x0 = solve_deterministic_limit(&self.inner, &xi, LimitMethod::Stepping)
            .map_err(runtime_err)?
            .path;
        let v = control_path(&self.inner, control)?;
        let cm = match mode {
            RateMode::Ldp => ControlledMode::Ldp,
            RateMode::Mdp => ControlledMode::MdpLinearized,
        };
        let path =
            solve_controlled_deterministic(&self.inner, &xi, &v, &x0, cm).map_err(runtime_err)?;
        Ok(rows(&path))
    }

    #[pyo3(signature = (xi, eps, n_particles, seed, xi_std = 0.0, workers = None))]
    fn simulate(
        &self,
        xi: Vec<f64>,
        eps: f64,
        n_particles: usize,
        seed: u64,
        xi_std: f64,
        workers: Option<usize>,
    ) -> PyResult<PyEnsemble> {
        let init = if xi_std == 0.0 {
            Initializer::Fixed(xi)
        } else {
            Initializer::Gaussian {
                mean: xi,
                std: xi_std,
            }
        };
        let opts = SimulationOptions {
            workers,
            ..SimulationOptions::default()
        };
        let ens = simulate_particles(&self.inner, &init, eps, n_particles, seed, &opts)
            .map_err(runtime_err)?;
        Ok(PyEnsemble { inner: ens })
    }

    /// `Λ(ψ)` for a target given as one row per grid node, starting at 0.
    fn mdp_rate(&self, xi: Vec<f64>, target: Vec<Vec<f64>>) -> PyResult<PyRateResult> {
        let problem = self.problem(RateMode::Mdp, &xi, target)?;
        Ok(mdp_rate(&problem).map_err(runtime_err)?.into())
    }

    /// `I(φ)` for a target given as one row per grid node, starting at `xi`.
    #[pyo3(signature = (xi, target, regularization = 0.0))]
    fn ldp_rate(
        &self,
        xi: Vec<f64>,
        target: Vec<Vec<f64>>,
        regularization: f64,
    ) -> PyResult<PyRateResult> {
        let problem = self
            .problem(RateMode::Ldp, &xi, target)?
            .with_regularization(regularization);
        Ok(ldp_rate(&problem, LdpSolver::Triangular)
            .map_err(runtime_err)?
            .into())
    }

    /// Least energy to end in `{normal · x >= level}`.
    #[pyo3(signature = (xi, normal, level, mode = "ldp"))]
    fn rate_min(
        &self,
        xi: Vec<f64>,
        normal: Vec<f64>,
        level: f64,
        mode: &str,
    ) -> PyResult<PyRateResult> {
        let mode = rate_mode(mode)?;
        let x0 = solve_deterministic_limit(&self.inner, &xi, LimitMethod::Stepping)
            .map_err(runtime_err)?
            .path;
        let (_, m) = self.inner.dims();
        let init = ControlPath::zero(self.inner.grid(), m);
        let set = Halfspace::new(normal, level);
        let sol = minimize_rate_endpoint(
            &self.inner,
            mode,
            &xi,
            &x0,
            &set,
            &init,
            &EndpointOptions::default(),
        )
        .map_err(runtime_err)?;
        Ok(sol.into())
    }
}

impl PyScheme {
    fn problem(&self, mode: RateMode, xi: &[f64], target: Vec<Vec<f64>>) -> PyResult<RateProblem> {
        let x0 = solve_deterministic_limit(&self.inner, xi, LimitMethod::Stepping)
            .map_err(runtime_err)?
            .path;
        let (d, _) = self.inner.dims();
        let flat = flatten(target, d)?;
        let target = GridPath::new(self.inner.grid(), d, flat).map_err(value_err)?;
        Ok(RateProblem::new(mode, self.inner.clone(), x0, target))
    }
}

fn rate_mode(mode: &str) -> PyResult<RateMode> {
    match mode {
        "ldp" => Ok(RateMode::Ldp),
        "mdp" => Ok(RateMode::Mdp),
        other => Err(PyValueError::new_err(format!(
            "unknown mode '{other}' (ldp, mdp)"
        ))),
    }
}

fn flatten(rows: Vec<Vec<f64>>, width: usize) -> PyResult<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "row of length {}, expected {width}",
            r.len()
        )));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn control_path(scheme: &Scheme, control: Vec<Vec<f64>>) -> PyResult<ControlPath> {
    let (_, m) = scheme.dims();
    ControlPath::new(scheme.grid(), m, flatten(control, m)?).map_err(value_err)
}

fn rows(path: &GridPath) -> Vec<Vec<f64>> {
    (0..=path.grid().n_steps())
        .map(|i| path.state(i).to_vec())
        .collect()
}

#[pyclass(name = "RateResult", frozen, get_all)]
struct PyRateResult {
    rate: f64,
    residual: f64,
    attained: bool,
    regularization_used: f64,
    iterations: usize,
    diagnostic: Option<String>,
    /// One row per grid cell.
    control: Vec<Vec<f64>>,
}

impl From<RateSolution> for PyRateResult {
    fn from(s: RateSolution) -> Self {
        let m = s.v_star.dim();
        Self {
            rate: s.rate,
            residual: s.residual,
            attained: s.attained,
            regularization_used: s.regularization_used,
            iterations: s.iterations,
            diagnostic: s.diagnostic,
            control: s.v_star.values().chunks(m).map(<[f64]>::to_vec).collect(),
        }
    }
}

#[pyclass(name = "Ensemble", frozen)]
struct PyEnsemble {
    inner: PathEnsemble,
}

#[pymethods]
impl PyEnsemble {
    fn n_particles(&self) -> usize {
        self.inner.n_particles()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Positions of every particle at a grid node.
    fn at(&self, step: usize) -> PyResult<Vec<Vec<f64>>> {
        if step > self.inner.grid().n_steps() {
            return Err(PyValueError::new_err(format!(
                "step {step} is past the grid"
            )));
        }
        Ok((0..self.inner.n_particles())
            .map(|p| self.inner.state(p, step).to_vec())
            .collect())
    }

    fn mean_path(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.mean_path())
    }

    #[pyo3(signature = (p_list = vec![2.0, 4.0]))]
    fn summary_csv(&self, p_list: Vec<f64>) -> String {
        self.inner.summary_csv(&p_list)
    }
}

/// `W_2` between two uniform empirical measures given as lists of points.
#[pyfunction]
fn wasserstein2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let dim = a.first().map_or(1, Vec::len);
    let mu = EmpiricalMeasure::uniform(dim, flatten(a, dim)?).map_err(value_err)?;
    let nu = EmpiricalMeasure::uniform(dim, flatten(b, dim)?).map_err(value_err)?;
    Ok(w2(&mu, &nu).map_err(value_err)?.distance)
}

/// Validates config text and returns it with every default filled in.
#[pyfunction]
fn validate_config(text: &str) -> PyResult<String> {
    harness::validate_config(text)
        .map(|c| c.to_toml())
        .map_err(value_err)
}

/// Runs a config file through the harness; returns the output directory.
#[pyfunction]
#[pyo3(signature = (config, out = None, workers = None))]
fn run_experiment(
    config: PathBuf,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> PyResult<String> {
    let registry = ModelRegistry::builtin();
    let mut cfg = harness::load_config(&config, &registry).map_err(value_err)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let report = harness::execute(&cfg, &registry, workers).map_err(|e| match e {
        harness::HarnessError::Validation(_) => value_err(e),
        other => runtime_err(other),
    })?;
    Ok(report.out_dir.display().to_string())
}

#[pymodule]
fn vmv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyLinearMeanField>()?;
    m.add_class::<PyScheme>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyRateResult>()?;
    m.add_function(wrap_pyfunction!(resolvent, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein2, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
