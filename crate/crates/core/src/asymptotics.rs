//! Fluctuations around the deterministic limit.
//!
//! `Z^ε = (X^ε - X⁰)/√ε` is simulated through its own equation, with drift
//! `[b(X⁰ + √ε Z^ε, L(X^ε)) - b(X⁰, δ_{X⁰})]/√ε`, and the Gaussian limit `Z`
//! on the same driver increments, so their difference isolates the
//! linearization error and vanishes exactly when `b ≡ 0` and `σ` is constant.

use thiserror::Error;

use crate::coefficients::CoefficientError;
use crate::harness::rng::{Purpose, RngStream};
use crate::measures::EmpiricalMeasure;
use crate::stats::{linear_fit, mean};
use crate::volterra::{
    check_budget, run_engine, solve_deterministic_limit, Dynamics, EngineSpec, GridPath,
    Initializer, LimitMethod, Moderate, PathEnsemble, Scheme, SimulationOptions, VolterraError,
};

/// Bootstrap resamples behind [`GapEstimate::stderr`].
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Largest number of `(i, j)` grid pairs visited per particle by [`holder_probe`].
pub const HOLDER_PAIR_BUDGET: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymptoticsError {
    #[error(transparent)]
    Volterra(#[from] VolterraError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("the two ensembles were not driven by the same increments")]
    Uncoupled,
    #[error("regression needs {0}")]
    Regression(String),
}

impl From<crate::measures::MeasureError> for AsymptoticsError {
    fn from(e: crate::measures::MeasureError) -> Self {
        Self::Volterra(e.into())
    }
}

/// `Z^ε` and its limit `Z` on shared increments.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationPair {
    pub z_eps: PathEnsemble,
    pub z_lim: PathEnsemble,
    pub eps: f64,
    /// The deterministic limit both fluctuations are measured against.
    pub x0: GridPath,
}

/// Linear equation of the fluctuation limit:
/// `Z = ∫K1 [∇b(X⁰) Z + E⟨D^L b(X⁰)(X⁰), Z⟩] ds + ∫K2 σ(X⁰) dW`,
/// the expectation taken over the ensemble.
struct FluctuationLimit {
    d: usize,
    m: usize,
    jac: Vec<f64>,
    lions: Vec<f64>,
    sigma: Vec<f64>,
}

impl Dynamics for FluctuationLimit {
    fn law(&self, _step: usize, states: &[f64]) -> Result<EmpiricalMeasure, VolterraError> {
        Ok(EmpiricalMeasure::uniform(self.d, states.to_vec())?)
    }

    fn terms(
        &self,
        step: usize,
        _t: f64,
        z: &[f64],
        law: &EmpiricalMeasure,
        drift: &mut [f64],
        sigma: &mut [f64],
    ) {
        let (d, m) = (self.d, self.m);
        let jac = &self.jac[step * d * d..(step + 1) * d * d];
        let lions = &self.lions[step * d * d..(step + 1) * d * d];
        let zbar = law.mean();
        for (r, o) in drift.iter_mut().enumerate() {
            *o = (0..d)
                .map(|k| jac[r * d + k] * z[k] + lions[r * d + k] * zbar[k])
                .sum();
        }
        sigma.copy_from_slice(&self.sigma[step * d * m..(step + 1) * d * m]);
    }
}

/// Simulates `Z^ε = (X^ε - X⁰)/√ε` and the fluctuation limit on the same
/// increments. The initial condition must be
/// deterministic and the model must provide `∇b` and `D^L b`.
pub fn clt_pair(
    scheme: &Scheme,
    xi: &Initializer,
    eps: f64,
    n_particles: usize,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<FluctuationPair, AsymptoticsError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(AsymptoticsError::InvalidParameter(format!(
            "eps = {eps} must lie in (0, 1]"
        )));
    }
    let xi = match xi {
        Initializer::Fixed(x) => x.clone(),
        Initializer::Gaussian { mean, std } if *std == 0.0 => mean.clone(),
        Initializer::Gaussian { .. } => {
            return Err(AsymptoticsError::InvalidParameter(
                "fluctuations need a deterministic initial condition".into(),
            ))
        }
    };
    let (d, m) = scheme.dims();
    let grid = scheme.grid();
    let n = grid.n_steps();
    let x0 = solve_deterministic_limit(scheme, &xi, LimitMethod::Stepping)?.path;

    let coeffs = scheme.coeffs();
    let mut jac = vec![0.0; n * d * d];
    let mut lions = vec![0.0; n * d * d];
    let mut sigma = vec![0.0; n * d * m];
    for i in 0..n {
        let t = grid.time(i);
        let x = x0.state(i);
        let dirac = EmpiricalMeasure::dirac(x)?;
        coeffs.drift_jacobian(t, x, &dirac, &mut jac[i * d * d..(i + 1) * d * d])?;
        coeffs.lions_drift(t, x, &dirac, x, &mut lions[i * d * d..(i + 1) * d * d])?;
        coeffs.diffusion(t, x, &dirac, &mut sigma[i * d * m..(i + 1) * d * m]);
    }

    if n_particles == 0 {
        return Err(AsymptoticsError::InvalidParameter(
            "need at least one particle".into(),
        ));
    }
    check_budget(n_particles, grid, d, opts.memory_budget)?;
    let ids = match &opts.stream_ids {
        Some(ids) if ids.len() != n_particles => {
            return Err(AsymptoticsError::InvalidParameter(format!(
                "{} stream ids for {n_particles} particles",
                ids.len()
            )))
        }
        Some(ids) => ids.clone(),
        None => (0..n_particles as u64).collect(),
    };
    let spec = EngineSpec {
        grid,
        d,
        m,
        w1: scheme.w1(),
        w2: scheme.w2(),
        control: None,
        noise_scale: 1.0,
        init: vec![0.0; n_particles * d],
        seed,
        stream_ids: ids,
        workers: opts.workers,
    };
    let z_eps = PathEnsemble {
        grid,
        dim: d,
        noise_dim: m,
        n_particles,
        states: run_engine(&spec, &Moderate::new(scheme, &x0, eps.sqrt())?)?,
        seed,
        stream_ids: spec.stream_ids.clone(),
    };
    let dynamics = FluctuationLimit {
        d,
        m,
        jac,
        lions,
        sigma,
    };
    let states = run_engine(&spec, &dynamics)?;
    let z_lim = PathEnsemble {
        grid,
        dim: d,
        noise_dim: m,
        n_particles,
        states,
        seed,
        stream_ids: spec.stream_ids,
    };
    Ok(FluctuationPair {
        z_eps,
        z_lim,
        eps,
        x0,
    })
}

/// Monte Carlo moment with a bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub p: f64,
    pub moment: f64,
    pub stderr: f64,
}

fn bootstrap_stderr(values: &[f64], seed: u64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let rng = RngStream::new(seed, Purpose::Bootstrap);
    let means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES as u64)
        .map(|b| {
            let total: f64 = (0..n as u64)
                .map(|j| {
                    let idx = ((rng.uniform(b, j, 0) * n as f64) as usize).min(n - 1);
                    values[idx]
                })
                .sum();
            total / n as f64
        })
        .collect();
    crate::stats::variance(&means).sqrt()
}

/// `E[sup_t |Z^ε_t - Z_t|^p]` over the coupled ensembles.
pub fn clt_gap(pair: &FluctuationPair, p: f64) -> Result<GapEstimate, AsymptoticsError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(AsymptoticsError::InvalidParameter(format!(
            "p = {p} must be at least 1"
        )));
    }
    if !pair.z_eps.shares_drivers_with(&pair.z_lim) {
        return Err(AsymptoticsError::Uncoupled);
    }
    let sups = pair.z_eps.sup_differences(&pair.z_lim)?;
    let values: Vec<f64> = sups.iter().map(|s| s.powf(p)).collect();
    Ok(GapEstimate {
        p,
        moment: mean(&values),
        stderr: bootstrap_stderr(&values, pair.z_eps.seed()),
    })
}

/// `E[sup_t |X_t - φ_t|^p]`.
pub fn sup_deviation_moment(
    ensemble: &PathEnsemble,
    path: &GridPath,
    p: f64,
) -> Result<GapEstimate, AsymptoticsError> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(AsymptoticsError::InvalidParameter(format!(
            "p = {p} must be positive"
        )));
    }
    let values: Vec<f64> = ensemble
        .sup_distances_to(path)?
        .iter()
        .map(|s| s.powf(p))
        .collect();
    Ok(GapEstimate {
        p,
        moment: mean(&values),
        stderr: bootstrap_stderr(&values, ensemble.seed()),
    })
}

/// `sup_t E|X_t|^p`.
pub fn sup_moment(ensemble: &PathEnsemble, p: f64) -> f64 {
    (0..=ensemble.grid().n_steps())
        .map(|i| {
            (0..ensemble.n_particles())
                .map(|q| {
                    ensemble
                        .state(q, i)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .powf(p)
                })
                .sum::<f64>()
                / ensemble.n_particles() as f64
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    /// Natural-log intercept.
    pub intercept: f64,
    pub r2: f64,
    pub expected_slope: f64,
}

impl ScalingFit {
    pub fn within(&self, tol: f64) -> bool {
        (self.slope - self.expected_slope).abs() <= tol
    }
}

/// Least squares of `log y` on `log x`. Needs at least four points whose
/// abscissae span two decades.
pub fn scaling_regression(
    points: &[(f64, f64)],
    expected_slope: f64,
) -> Result<ScalingFit, AsymptoticsError> {
    if points.len() < 4 {
        return Err(AsymptoticsError::Regression(format!(
            "at least 4 points, got {}",
            points.len()
        )));
    }
    if let Some((x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(AsymptoticsError::Regression(format!(
            "positive finite values, got ({x}, {y})"
        )));
    }
    let lx: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let span = lx.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - lx.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < 2.0 * std::f64::consts::LN_10 - 1e-12 {
        return Err(AsymptoticsError::Regression(format!(
            "abscissae spanning two decades, got {:.3}",
            span / std::f64::consts::LN_10
        )));
    }
    let fit = linear_fit(&lx, &ly);
    Ok(ScalingFit {
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        expected_slope,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderEstimate {
    pub alpha: f64,
    /// `(E[S^p])^{1/p}` with `S = sup_{i<j} |X_j - X_i| / (t_j - t_i)^α`.
    pub stat: f64,
    pub pairs_per_particle: usize,
}

/// Hölder ratio statistic of an ensemble. Every lag is visited; when the
/// grid has more than [`HOLDER_PAIR_BUDGET`] pairs, the start points of each
/// lag are thinned evenly.
pub fn holder_probe(
    ensemble: &PathEnsemble,
    alpha: f64,
    p: f64,
) -> Result<HolderEstimate, AsymptoticsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AsymptoticsError::InvalidParameter(format!(
            "alpha = {alpha} must lie in (0, 1]"
        )));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(AsymptoticsError::InvalidParameter(format!(
            "p = {p} must be at least 1"
        )));
    }
    let grid = ensemble.grid();
    let n = grid.n_steps();
    if n < 2 {
        return Err(AsymptoticsError::InvalidParameter(
            "degenerate grid: need at least 2 steps".into(),
        ));
    }
    let d = ensemble.dim();
    let dt = grid.dt();
    let per_lag = (HOLDER_PAIR_BUDGET / n).max(1);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for lag in 1..=n {
        let starts = n + 1 - lag;
        let stride = starts.div_ceil(per_lag).max(1);
        pairs.extend((0..starts).step_by(stride).map(|i| (i, i + lag)));
    }
    let denom: Vec<f64> = (1..=n).map(|lag| (lag as f64 * dt).powf(alpha)).collect();
    let sups: Vec<f64> = (0..ensemble.n_particles())
        .map(|q| {
            let x = ensemble.particle(q);
            pairs
                .iter()
                .map(|&(i, j)| {
                    let dist = (0..d)
                        .map(|c| (x[j * d + c] - x[i * d + c]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    dist / denom[j - i - 1]
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let stat = mean(&sups.iter().map(|s| s.powf(p)).collect::<Vec<_>>()).powf(1.0 / p);
    Ok(HolderEstimate {
        alpha,
        stat,
        pairs_per_particle: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_regressions() {
        let eps = [1e-1, 1e-2, 1e-3, 1e-4];
        let exact: Vec<_> = eps.iter().map(|&e| (e, e)).collect();
        let fit = scaling_regression(&exact, 1.0).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
        let root: Vec<_> = eps.iter().map(|&e| (e, 3.0 * e.sqrt())).collect();
        let fit = scaling_regression(&root, 0.5).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.within(1e-9));
    }

    #[test]
    fn regression_preconditions() {
        assert!(scaling_regression(&[(1.0, 1.0), (0.1, 1.0), (0.01, 1.0)], 1.0).is_err());
        assert!(
            scaling_regression(&[(1.0, 1.0), (0.5, 1.0), (0.2, 1.0), (0.1, 1.0)], 1.0).is_err()
        );
        assert!(
            scaling_regression(&[(1.0, 1.0), (0.1, 0.0), (0.01, 1.0), (0.001, 1.0)], 1.0).is_err()
        );
        assert!(
            scaling_regression(&[(1.0, 1.0), (0.1, 1.0), (-0.01, 1.0), (0.001, 1.0)], 1.0).is_err()
        );
    }

    #[test]
    fn bootstrap_is_deterministic_and_sane() {
        let values: Vec<f64> = (0..400).map(|i| (i % 7) as f64).collect();
        let a = bootstrap_stderr(&values, 3);
        assert_eq!(a, bootstrap_stderr(&values, 3));
        let naive = crate::stats::standard_error(&values);
        assert!((a / naive - 1.0).abs() < 0.25, "{a} vs {naive}");
        assert_eq!(bootstrap_stderr(&[1.0], 0), 0.0);
    }
}
