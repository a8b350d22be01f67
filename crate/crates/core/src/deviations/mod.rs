//! Rate functionals as discrete control problems.
//!
//! On the grid, the controlled equations are lower block-triangular in the
//! control, so evaluating `I(φ)` or `Λ(ψ)` reduces to inverting a first-kind
//! triangular system for the cheapest `v` that reproduces the target.

mod endpoint;
mod rates;
mod tail;

use thiserror::Error;

use crate::coefficients::CoefficientError;
use crate::measures::MeasureError;
use crate::volterra::{ControlPath, GridPath, Scheme, VolterraError};

pub use endpoint::{minimize_rate_endpoint, EndpointOptions, Halfspace};
pub use rates::{ldp_rate, mdp_rate, LdpSolver};
pub use tail::{tail_probability_probe, TailMode, TailRow};

/// Residuals up to `RESIDUAL_TOL · (1 + sup|target|)` count as attained.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Relative size of the automatic regularization used when a diagonal
/// weight of the control system vanishes.
pub const AUTO_REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviationError {
    #[error(transparent)]
    Volterra(#[from] VolterraError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("diffusion at step {step} has rank {rank} < d = {d}; supply a regularization")]
    RankDeficient { step: usize, rank: usize, d: usize },
    #[error("linear algebra: {0}")]
    Numerical(String),
}

impl From<MeasureError> for DeviationError {
    fn from(e: MeasureError) -> Self {
        Self::Volterra(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    Ldp,
    Mdp,
}

/// Target path and everything needed to invert the control map onto it.
#[derive(Debug, Clone)]
pub struct RateProblem {
    pub mode: RateMode,
    pub scheme: Scheme,
    /// Deterministic limit `X⁰`, which carries the frozen law `δ_{X⁰}`.
    pub x0: GridPath,
    /// `φ` (starting at `ξ`) or `ψ` (starting at 0).
    pub target: GridPath,
    /// Tikhonov weight `λ_reg ≥ 0`.
    pub regularization: f64,
}

impl RateProblem {
    pub fn new(mode: RateMode, scheme: Scheme, x0: GridPath, target: GridPath) -> Self {
        Self {
            mode,
            scheme,
            x0,
            target,
            regularization: 0.0,
        }
    }

    pub fn with_regularization(mut self, lambda: f64) -> Self {
        self.regularization = lambda;
        self
    }

    fn validate(&self) -> Result<(), DeviationError> {
        let (d, _) = self.scheme.dims();
        let grid = self.scheme.grid();
        for (name, path) in [("target", &self.target), ("limit path", &self.x0)] {
            if path.grid() != grid || path.dim() != d {
                return Err(DeviationError::GridMismatch(format!(
                    "{name} does not match the scheme grid"
                )));
            }
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(DeviationError::InvalidParameter(format!(
                "regularization {} must be finite and nonnegative",
                self.regularization
            )));
        }
        let start = self.target.state(0);
        match self.mode {
            RateMode::Ldp if start != self.x0.state(0) => Err(DeviationError::InvalidParameter(
                "target must start at the initial condition of the limit path".into(),
            )),
            RateMode::Mdp if start.iter().any(|v| *v != 0.0) => Err(
                DeviationError::InvalidParameter("target must start at 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSolution {
    pub v_star: ControlPath,
    /// `½ Σ |v_k|² Δ`.
    pub rate: f64,
    /// Sup-norm defect after pushing `v_star` back through the controlled
    /// equation.
    pub residual: f64,
    pub attained: bool,
    /// Tikhonov weight actually used (automatic or supplied).
    pub regularization_used: f64,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

/// `g = A v` with `A` block lower-triangular: block `(i, k)`, `k < i`, is
/// `Δ wc[i][k] S_k`. Rows are grid nodes `1..=n`, columns control cells.
struct ControlSystem<'a> {
    n: usize,
    d: usize,
    m: usize,
    dt: f64,
    wc: &'a crate::kernels::GridKernel,
    /// `n × d × m` diffusion matrices along the target.
    s: Vec<f64>,
}

impl ControlSystem<'_> {
    fn block(&self, k: usize) -> &[f64] {
        let dm = self.d * self.m;
        &self.s[k * dm..(k + 1) * dm]
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (d, m) = (self.d, self.m);
        let mut sv = vec![0.0; self.n * d];
        for k in 0..self.n {
            let s = self.block(k);
            for r in 0..d {
                sv[k * d + r] = (0..m).map(|j| s[r * m + j] * v[k * m + j]).sum();
            }
        }
        let mut out = vec![0.0; self.n * d];
        for i in 1..=self.n {
            let w = self.wc.row(i);
            for c in 0..d {
                out[(i - 1) * d + c] = self.dt
                    * w.iter()
                        .enumerate()
                        .map(|(k, wk)| wk * sv[k * d + c])
                        .sum::<f64>();
            }
        }
        out
    }

    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        let (d, m) = (self.d, self.m);
        let mut acc = vec![0.0; self.n * d];
        for i in 1..=self.n {
            let w = self.wc.row(i);
            for (k, wk) in w.iter().enumerate() {
                for c in 0..d {
                    acc[k * d + c] += wk * r[(i - 1) * d + c];
                }
            }
        }
        let mut out = vec![0.0; self.n * m];
        for k in 0..self.n {
            let s = self.block(k);
            for j in 0..m {
                out[k * m + j] =
                    self.dt * (0..d).map(|r| s[r * m + j] * acc[k * d + r]).sum::<f64>();
            }
        }
        out
    }

    fn dense(&self) -> nalgebra::DMatrix<f64> {
        let (d, m) = (self.d, self.m);
        let mut a = nalgebra::DMatrix::zeros(self.n * d, self.n * m);
        for i in 1..=self.n {
            for (k, wk) in self.wc.row(i).iter().enumerate() {
                let s = self.block(k);
                for r in 0..d {
                    for j in 0..m {
                        a[((i - 1) * d + r, k * m + j)] = self.dt * wk * s[r * m + j];
                    }
                }
            }
        }
        a
    }
}
