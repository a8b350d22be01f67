//! Numerical toolkit for Volterra-type McKean-Vlasov equations
//!
//! `X_t = ξ + ∫_0^t K1(t,s) b(s, X_s, L(X_s)) ds + √ε ∫_0^t K2(t,s) σ(s, X_s, L(X_s)) dW_s`
//!
//! with possibly singular kernels: interacting particle solvers, the
//! deterministic and controlled limit equations, coupled fluctuation
//! processes, and rate functionals evaluated as discrete control problems.

// `!(x > 0.0)` is used on purpose to reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod coefficients;
pub mod deviations;
pub mod harness;
pub mod kernels;
pub mod measures;
pub mod quadrature;
pub mod stats;
pub mod volterra;

pub use coefficients::{Coefficients, CustomCoefficients, LinearMeanField};
pub use kernels::{Grid, GridKernel, Kernel};
pub use measures::EmpiricalMeasure;
pub use volterra::{ControlPath, GridPath, PathEnsemble, Scheme, VolterraModel};
