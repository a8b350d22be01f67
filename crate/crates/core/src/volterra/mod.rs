//! Solvers on a uniform grid with kernel-averaged weights: the deterministic
//! limit, the interacting particle system, and the controlled equations.
//!
//! Every scheme is left-point: the coefficient at `t_k` multiplies the cell
//! weight `w[i][k]`. States of all particles are kept for the whole history,
//! since the dynamics are not Markovian.

mod engine;
mod limit;
mod paths;

use std::sync::Arc;

use thiserror::Error;

use crate::coefficients::{CoefficientError, Coefficients};
use crate::kernels::{Grid, GridKernel, Kernel, KernelError};
use crate::measures::MeasureError;

pub use engine::{
    simulate_controlled, simulate_particles, Initializer, LawMode, NoiseForm, SimulationOptions,
    DEFAULT_MEMORY_BUDGET, OVERFLOW_GUARD,
};
pub use limit::{
    solve_controlled_deterministic, solve_deterministic_limit, ControlledMode, LimitMethod,
    LimitSolution,
};
pub use paths::{ControlPath, GridPath, PathEnsemble};

pub(crate) use engine::{check_budget, run_engine, Dynamics, EngineSpec, Moderate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolterraError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(
        "blow-up at step {step}, particle {particle}: |x| = {value:e} exceeds the overflow guard"
    )]
    Blowup {
        step: usize,
        particle: usize,
        value: f64,
    },
    #[error("no convergence after {iterations} iterations (last change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("memory estimate of {required} bytes exceeds the budget of {limit} bytes")]
    Budget { required: u64, limit: u64 },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Kernels and coefficients of one equation.
#[derive(Clone)]
pub struct VolterraModel {
    pub k1: Kernel,
    pub k2: Kernel,
    /// Control kernel. `None` follows each equation as written: `K1` for the
    /// LDP form, `K2` for the MDP form.
    pub kc: Option<Kernel>,
    pub coeffs: Arc<dyn Coefficients>,
}

impl std::fmt::Debug for VolterraModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolterraModel")
            .field("k1", &self.k1)
            .field("k2", &self.k2)
            .field("kc", &self.kc)
            .field("dims", &self.coeffs.dims())
            .finish()
    }
}

impl VolterraModel {
    pub fn new(k1: Kernel, k2: Kernel, coeffs: Arc<dyn Coefficients>) -> Self {
        Self {
            k1,
            k2,
            kc: None,
            coeffs,
        }
    }

    pub fn with_control_kernel(mut self, kc: Kernel) -> Self {
        self.kc = Some(kc);
        self
    }
}

/// Which equation a control enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlForm {
    Ldp,
    Mdp,
}

/// A model discretized on a grid: averaged weights for every kernel.
#[derive(Clone)]
pub struct Scheme {
    grid: Grid,
    coeffs: Arc<dyn Coefficients>,
    w1: GridKernel,
    w2: GridKernel,
    wc: Option<GridKernel>,
}

impl std::fmt::Debug for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheme")
            .field("grid", &self.grid)
            .field("dims", &self.coeffs.dims())
            .field("explicit_control_kernel", &self.wc.is_some())
            .finish()
    }
}

impl Scheme {
    pub fn new(model: &VolterraModel, grid: Grid) -> Result<Self, VolterraError> {
        let w1 = GridKernel::from_kernel(&model.k1, grid)?;
        let w2 = GridKernel::from_kernel(&model.k2, grid)?;
        let wc = model
            .kc
            .as_ref()
            .map(|k| GridKernel::from_kernel(k, grid))
            .transpose()?;
        Ok(Self {
            grid,
            coeffs: model.coeffs.clone(),
            w1,
            w2,
            wc,
        })
    }

    /// Scheme from precomputed weights.
    pub fn from_weights(
        coeffs: Arc<dyn Coefficients>,
        w1: GridKernel,
        w2: GridKernel,
        wc: Option<GridKernel>,
    ) -> Result<Self, VolterraError> {
        let grid = w1.grid();
        if w2.grid() != grid || wc.as_ref().is_some_and(|w| w.grid() != grid) {
            return Err(VolterraError::GridMismatch(
                "weights on different grids".into(),
            ));
        }
        Ok(Self {
            grid,
            coeffs,
            w1,
            w2,
            wc,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn coeffs(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    pub fn coeffs_arc(&self) -> Arc<dyn Coefficients> {
        self.coeffs.clone()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.coeffs.dims()
    }

    pub fn w1(&self) -> &GridKernel {
        &self.w1
    }

    pub fn w2(&self) -> &GridKernel {
        &self.w2
    }

    /// Control weights for the given form.
    pub fn wc(&self, form: ControlForm) -> &GridKernel {
        match (&self.wc, form) {
            (Some(w), _) => w,
            (None, ControlForm::Ldp) => &self.w1,
            (None, ControlForm::Mdp) => &self.w2,
        }
    }
}
