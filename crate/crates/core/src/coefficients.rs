//! Drift and diffusion coefficients `b(t, x, μ)`, `σ(t, x, μ)` with their
//! spatial and measure derivatives, plus sampling probes for the declared
//! Lipschitz and growth constants.
//!
//! Matrices are flat row-major slices: `σ` is `d × m`, `∇b` and `D^L b` are
//! `d × d`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::harness::rng::{Purpose, RngStream};
use crate::measures::{distance_to_dirac0, wasserstein2, EmpiricalMeasure, MeasureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("coefficient set does not provide {0}")]
    Missing(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value from {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Constants `L1..L6` as declared by a model. They are only ever compared
/// against probe output, never assumed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeclaredConstants {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub l4: Option<f64>,
    pub l5: Option<f64>,
    pub l6: Option<f64>,
}

/// Coefficients of the equation. Implementations must be pure: the particle
/// engine calls them concurrently.
pub trait Coefficients: Send + Sync {
    /// `(d, m)`: state and noise dimensions.
    fn dims(&self) -> (usize, usize);

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    /// `d × m`, row-major.
    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    /// `∇b(t, x, μ)`, `d × d` with `out[i * d + j] = ∂b_i/∂x_j`.
    fn drift_jacobian(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        Err(CoefficientError::Missing("grad_b"))
    }

    /// `D^L b(t, x, μ)(y)`, `d × d`.
    fn lions_drift(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        Err(CoefficientError::Missing("lions_b"))
    }

    fn constants(&self) -> DeclaredConstants {
        DeclaredConstants::default()
    }
}

/// `b(t, x, μ) = A x + B mean(μ)`, `σ(t, x, μ) = σ0 + σ1 · x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMeanField {
    d: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    sigma0: Vec<f64>,
    /// `d × m × d`: entry `(i, j)` of `σ` gains `Σ_k sigma1[(i m + j) d + k] x_k`.
    sigma1: Option<Vec<f64>>,
}

impl LinearMeanField {
    pub fn new(
        d: usize,
        m: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        sigma0: Vec<f64>,
        sigma1: Option<Vec<f64>>,
    ) -> Result<Self, CoefficientError> {
        if d == 0 || m == 0 {
            return Err(CoefficientError::Dimension(
                "d and m must be positive".into(),
            ));
        }
        let check = |name: &str, v: &[f64], len: usize| {
            if v.len() != len {
                return Err(CoefficientError::Dimension(format!(
                    "{name} has {} entries, expected {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CoefficientError::InvalidParameter(format!(
                    "{name} is not finite"
                )));
            }
            Ok(())
        };
        check("A", &a, d * d)?;
        check("B", &b, d * d)?;
        check("sigma0", &sigma0, d * m)?;
        if let Some(s1) = &sigma1 {
            check("sigma1", s1, d * m * d)?;
        }
        Ok(Self {
            d,
            m,
            a,
            b,
            sigma0,
            sigma1,
        })
    }

    /// One-dimensional model `b = a x + b̄ mean(μ)`, `σ = s`.
    pub fn scalar(a: f64, b: f64, sigma0: f64) -> Self {
        Self::new(1, 1, vec![a], vec![b], vec![sigma0], None).unwrap()
    }

    /// `d = m` with `A = a I`, `B = b I`, `σ0 = s I`.
    pub fn isotropic(d: usize, a: f64, b: f64, sigma0: f64) -> Self {
        let eye = |c: f64| -> Vec<f64> {
            (0..d * d)
                .map(|k| if k / d == k % d { c } else { 0.0 })
                .collect()
        };
        Self::new(d, d, eye(a), eye(b), eye(sigma0), None).unwrap()
    }

    pub fn with_sigma1(mut self, sigma1: Vec<f64>) -> Result<Self, CoefficientError> {
        if sigma1.len() != self.d * self.m * self.d {
            return Err(CoefficientError::Dimension(format!(
                "sigma1 has {} entries, expected {}",
                sigma1.len(),
                self.d * self.m * self.d
            )));
        }
        self.sigma1 = Some(sigma1);
        Ok(self)
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma0(&self) -> &[f64] {
        &self.sigma0
    }

    pub fn sigma1(&self) -> Option<&[f64]> {
        self.sigma1.as_deref()
    }

    /// `σ` does not depend on the state.
    pub fn additive_noise(&self) -> bool {
        self.sigma1
            .as_ref()
            .is_none_or(|s| s.iter().all(|v| *v == 0.0))
    }
}

impl Coefficients for LinearMeanField {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.d;
        let mean = mu.mean();
        for (i, o) in out.iter_mut().enumerate() {
            let row_a = &self.a[i * d..(i + 1) * d];
            let row_b = &self.b[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += row_a[k] * x[k] + row_b[k] * mean[k];
            }
            *o = acc;
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.copy_from_slice(&self.sigma0);
        if let Some(s1) = &self.sigma1 {
            let d = self.d;
            for (e, o) in out.iter_mut().enumerate() {
                let row = &s1[e * d..(e + 1) * d];
                *o += row.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
            }
        }
    }

    fn drift_jacobian(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        out.copy_from_slice(&self.a);
        Ok(())
    }

    fn lions_drift(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        out.copy_from_slice(&self.b);
        Ok(())
    }

    fn constants(&self) -> DeclaredConstants {
        let d = self.d;
        let na = operator_norm(d, d, &self.a);
        let nb = operator_norm(d, d, &self.b);
        // x ↦ σ1 · x as a map into d × m matrices with the Frobenius norm
        let ns1 = self
            .sigma1
            .as_ref()
            .map_or(0.0, |s| operator_norm(d * self.m, d, s));
        let ns0 = frobenius(&self.sigma0);
        DeclaredConstants {
            l1: Some(na + nb + ns1),
            l2: Some((na + ns1).max(nb).max(ns0)),
            l3: Some(na),
            l4: Some(0.0),
            l5: Some(0.0),
            l6: Some(na),
        }
    }
}

type DriftFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
type LionsFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync;

/// Coefficients assembled from closures.
#[derive(Clone)]
pub struct CustomCoefficients {
    d: usize,
    m: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DriftFn>,
    jacobian: Option<Arc<JacobianFn>>,
    lions: Option<Arc<LionsFn>>,
    constants: DeclaredConstants,
}

impl fmt::Debug for CustomCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCoefficients")
            .field("d", &self.d)
            .field("m", &self.m)
            .field("jacobian", &self.jacobian.is_some())
            .field("lions", &self.lions.is_some())
            .field("constants", &self.constants)
            .finish()
    }
}

impl CustomCoefficients {
    pub fn new<B, S>(d: usize, m: usize, drift: B, diffusion: S) -> Self
    where
        B: Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            d,
            m,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            jacobian: None,
            lions: None,
            constants: DeclaredConstants::default(),
        }
    }

    pub fn with_jacobian<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(f));
        self
    }

    pub fn with_lions<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.lions = Some(Arc::new(f));
        self
    }

    pub fn with_constants(mut self, constants: DeclaredConstants) -> Self {
        self.constants = constants;
        self
    }
}

impl Coefficients for CustomCoefficients {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.drift)(t, x, mu, out)
    }

    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.diffusion)(t, x, mu, out)
    }

    fn drift_jacobian(
        &self,
        t: f64,
        x: &[f64],
        mu: &EmpiricalMeasure,
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        let f = self
            .jacobian
            .as_ref()
            .ok_or(CoefficientError::Missing("grad_b"))?;
        f(t, x, mu, out);
        Ok(())
    }

    fn lions_drift(
        &self,
        t: f64,
        x: &[f64],
        mu: &EmpiricalMeasure,
        y: &[f64],
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        let f = self
            .lions
            .as_ref()
            .ok_or(CoefficientError::Missing("lions_b"))?;
        f(t, x, mu, y, out);
        Ok(())
    }

    fn constants(&self) -> DeclaredConstants {
        self.constants
    }
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn operator_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    if data.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    if rows == 1 || cols == 1 {
        return frobenius(data);
    }
    DMatrix::from_row_slice(rows, cols, data)
        .singular_values()
        .max()
}

pub fn frobenius(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn euclid(x: &[f64]) -> f64 {
    frobenius(x)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Seeded generator of probe inputs: times uniform on `[0, horizon]`, states
/// uniform on `[-radius, radius]^d`, and uniform-weight measures with `atoms`
/// atoms drawn the same way (one shared measure when `fixed_measure`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSampler {
    pub seed: u64,
    pub dim: usize,
    pub radius: f64,
    pub horizon: f64,
    pub atoms: usize,
    pub fixed_measure: bool,
}

impl ProbeSampler {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            radius: 1.0,
            horizon: 1.0,
            atoms: 8,
            fixed_measure: false,
        }
    }

    fn sample(&self, k: usize) -> Result<(f64, Vec<f64>, EmpiricalMeasure), MeasureError> {
        let rng = RngStream::new(self.seed, Purpose::Sampler);
        let k = k as u64;
        let t = self.horizon * rng.uniform(k, 0, 0);
        let x: Vec<f64> = (0..self.dim)
            .map(|c| self.radius * (2.0 * rng.uniform(k, 1, c as u64) - 1.0))
            .collect();
        let mk = if self.fixed_measure { u64::MAX } else { k };
        let atoms: Vec<f64> = (0..self.atoms.max(1) * self.dim)
            .map(|c| self.radius * (2.0 * rng.uniform(mk, 2, c as u64) - 1.0))
            .collect();
        Ok((t, x, EmpiricalMeasure::uniform(self.dim, atoms)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    /// Second state for pair ratios.
    pub y: Option<Vec<f64>>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    /// `max (|Δb| + ‖Δσ‖) / (|x - y| + W_2(μ, ν))` over sampled pairs.
    pub l1_hat: f64,
    /// `max (|b| + ‖σ‖) / (1 + |x| + W_2(μ, δ_0))` over sampled points.
    pub l2_hat: f64,
    /// `max ‖∇b‖`, when the gradient is available.
    pub l3_hat: Option<f64>,
    /// `max ‖∇b(x, μ) - ∇b(y, ν)‖ / (|x - y| + W_2(μ, ν))`.
    pub l5_hat: Option<f64>,
    /// `max_t ‖∇b(t, 0, δ_0)‖`.
    pub l6_hat: Option<f64>,
    pub l1_witness: Option<Witness>,
    pub l2_witness: Option<Witness>,
    /// Names of declared constants exceeded by more than `1e-9`.
    pub falsified: Vec<&'static str>,
}

/// Empirical maxima of the Lipschitz and growth ratios over `n_samples`
/// sampled points and all pairs among them. Matrix norms: Frobenius for `σ`,
/// spectral for `∇b`.
pub fn lipschitz_probe(
    coeffs: &dyn Coefficients,
    sampler: &ProbeSampler,
    n_samples: usize,
) -> Result<LipschitzReport, CoefficientError> {
    if n_samples < 2 {
        return Err(CoefficientError::InvalidParameter(
            "lipschitz probe needs at least 2 samples".into(),
        ));
    }
    let (d, m) = coeffs.dims();
    if sampler.dim != d {
        return Err(CoefficientError::Dimension(format!(
            "sampler dimension {} but coefficients have d = {d}",
            sampler.dim
        )));
    }
    struct Sample {
        t: f64,
        x: Vec<f64>,
        mu: EmpiricalMeasure,
        b: Vec<f64>,
        s: Vec<f64>,
        grad: Option<Vec<f64>>,
    }
    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let (t, x, mu) = sampler.sample(k)?;
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * m];
        coeffs.drift(t, &x, &mu, &mut b);
        coeffs.diffusion(t, &x, &mu, &mut s);
        if b.iter().chain(&s).any(|v| !v.is_finite()) {
            return Err(CoefficientError::NonFinite {
                what: "b or sigma",
                t,
            });
        }
        let mut g = vec![0.0; d * d];
        let grad = coeffs.drift_jacobian(t, &x, &mu, &mut g).ok().map(|_| g);
        samples.push(Sample {
            t,
            x,
            mu,
            b,
            s,
            grad,
        });
    }

    let mut l2_hat = 0.0f64;
    let mut l2_witness = None;
    let mut l3_hat: Option<f64> = None;
    for s in &samples {
        let ratio =
            (euclid(&s.b) + frobenius(&s.s)) / (1.0 + euclid(&s.x) + distance_to_dirac0(&s.mu));
        if ratio > l2_hat || l2_witness.is_none() {
            l2_hat = ratio;
            l2_witness = Some(Witness {
                t: s.t,
                x: s.x.clone(),
                y: None,
                ratio,
            });
        }
        if let Some(g) = &s.grad {
            l3_hat = Some(l3_hat.unwrap_or(0.0).max(operator_norm(d, d, g)));
        }
    }

    let mut l1_hat = 0.0f64;
    let mut l1_witness = None;
    let mut l5_hat: Option<f64> = None;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (p, q) = (&samples[i], &samples[j]);
            // (H2) is stated at a common time; pair each point with the
            // other's state and law at its own time.
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * m];
            coeffs.drift(p.t, &q.x, &q.mu, &mut b);
            coeffs.diffusion(p.t, &q.x, &q.mu, &mut s);
            let w = wasserstein2(&p.mu, &q.mu)?.distance;
            let denom = diff_norm(&p.x, &q.x) + w;
            if denom <= 0.0 {
                continue;
            }
            let ratio = (diff_norm(&p.b, &b) + diff_norm(&p.s, &s)) / denom;
            if ratio > l1_hat || l1_witness.is_none() {
                l1_hat = ratio;
                l1_witness = Some(Witness {
                    t: p.t,
                    x: p.x.clone(),
                    y: Some(q.x.clone()),
                    ratio,
                });
            }
            if let Some(gp) = &p.grad {
                let mut gq = vec![0.0; d * d];
                if coeffs.drift_jacobian(p.t, &q.x, &q.mu, &mut gq).is_ok() {
                    let diff: Vec<f64> = gp.iter().zip(&gq).map(|(a, b)| a - b).collect();
                    let r = operator_norm(d, d, &diff) / denom;
                    l5_hat = Some(l5_hat.unwrap_or(0.0).max(r));
                }
            }
        }
    }

    let mut l6_hat = None;
    let origin = EmpiricalMeasure::dirac(&vec![0.0; d])?;
    let zero = vec![0.0; d];
    let mut g = vec![0.0; d * d];
    for k in 0..=8 {
        let t = sampler.horizon * k as f64 / 8.0;
        if coeffs.drift_jacobian(t, &zero, &origin, &mut g).is_ok() {
            l6_hat = Some(l6_hat.unwrap_or(0.0f64).max(operator_norm(d, d, &g)));
        }
    }

    let declared = coeffs.constants();
    let mut falsified = Vec::new();
    let mut check = |name: &'static str, declared: Option<f64>, hat: Option<f64>| {
        if let (Some(c), Some(h)) = (declared, hat) {
            if h > c + 1e-9 {
                falsified.push(name);
            }
        }
    };
    check("L1", declared.l1, Some(l1_hat));
    check("L2", declared.l2, Some(l2_hat));
    check("L3", declared.l3, l3_hat);
    check("L5", declared.l5, l5_hat);
    check("L6", declared.l6, l6_hat);

    Ok(LipschitzReport {
        l1_hat,
        l2_hat,
        l3_hat,
        l5_hat,
        l6_hat,
        l1_witness,
        l2_witness,
        falsified,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LionsReport {
    /// `Σ_i w_i D^L b(t, x, μ)(x_i) φ(x_i)`.
    pub analytic: Vec<f64>,
    /// `(ε, [b(t, x, (id + εφ)#μ) - b(t, x, μ)] / ε)` per step.
    pub finite_differences: Vec<(f64, Vec<f64>)>,
    /// Largest componentwise discrepancy per step.
    pub discrepancies: Vec<f64>,
    /// Discrepancy extrapolated linearly to `ε = 0` from the two smallest steps.
    pub extrapolated: f64,
    pub passed: bool,
}

/// Tolerance on the extrapolated discrepancy, relative to `1 + |analytic|`.
pub const LIONS_TOL: f64 = 1e-6;

/// Compares finite differences of `b` along the push-forward `(id + εφ)#μ`
/// with the pairing `E⟨D^L b(μ)(X), φ(X)⟩`.
pub fn lions_fd_check<F>(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    phi: F,
    eps_list: &[f64],
) -> Result<LionsReport, CoefficientError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let (d, _) = coeffs.dims();
    if x.len() != d || mu.dim() != d {
        return Err(CoefficientError::Dimension(format!(
            "state of length {} and measure of dimension {} for d = {d}",
            x.len(),
            mu.dim()
        )));
    }
    if eps_list.is_empty()
        || eps_list.iter().any(|e| !(*e > 0.0))
        || eps_list.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(CoefficientError::InvalidParameter(
            "eps_list must be positive and strictly decreasing".into(),
        ));
    }
    let mut analytic = vec![0.0; d];
    let mut lions = vec![0.0; d * d];
    let mut dir = vec![0.0; d];
    for (y, w) in mu.points().zip(mu.weights()) {
        coeffs.lions_drift(t, x, mu, y, &mut lions)?;
        phi(y, &mut dir);
        for i in 0..d {
            analytic[i] += w * (0..d).map(|k| lions[i * d + k] * dir[k]).sum::<f64>();
        }
    }
    let mut base = vec![0.0; d];
    coeffs.drift(t, x, mu, &mut base);
    let mut finite_differences = Vec::with_capacity(eps_list.len());
    let mut errors: Vec<Vec<f64>> = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let moved = mu.push_forward(|y, out| {
            phi(y, out);
            for (o, v) in out.iter_mut().zip(y) {
                *o = v + eps * *o;
            }
        })?;
        let mut bumped = vec![0.0; d];
        coeffs.drift(t, x, &moved, &mut bumped);
        let fd: Vec<f64> = bumped
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b) / eps)
            .collect();
        if fd.iter().any(|v| !v.is_finite()) {
            return Err(CoefficientError::NonFinite {
                what: "perturbed drift",
                t,
            });
        }
        errors.push(fd.iter().zip(&analytic).map(|(a, b)| a - b).collect());
        finite_differences.push((eps, fd));
    }
    let discrepancies: Vec<f64> = errors
        .iter()
        .map(|e| e.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let extrapolated = match errors.len() {
        1 => discrepancies[0],
        n => {
            let (e1, e2) = (eps_list[n - 2], eps_list[n - 1]);
            errors[n - 2]
                .iter()
                .zip(&errors[n - 1])
                .map(|(a, b)| (b - e2 * (a - b) / (e1 - e2)).abs())
                .fold(0.0, f64::max)
        }
    };
    let scale = 1.0 + euclid(&analytic);
    Ok(LionsReport {
        analytic,
        finite_differences,
        discrepancies,
        extrapolated,
        passed: extrapolated <= LIONS_TOL * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_squared() -> CustomCoefficients {
        CustomCoefficients::new(
            1,
            1,
            |_, _, mu, out| out[0] = mu.mean()[0] * mu.mean()[0],
            |_, _, _, out| out[0] = 1.0,
        )
        .with_lions(|_, _, mu, _, out| out[0] = 2.0 * mu.mean()[0])
    }

    #[test]
    fn linear_model_evaluation() {
        let model = LinearMeanField::new(
            2,
            1,
            vec![1.0, 2.0, 0.0, 1.0],
            vec![0.5, 0.0, 0.0, 0.5],
            vec![1.0, 0.0],
            Some(vec![0.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        let mut b = [0.0; 2];
        model.drift(0.0, &[1.0, 1.0], &mu, &mut b);
        assert_eq!(b, [3.0 + 0.5, 1.0 + 1.0]);
        let mut s = [0.0; 2];
        model.diffusion(0.0, &[1.0, 3.0], &mu, &mut s);
        assert_eq!(s, [4.0, 0.0]);
        assert!(!model.additive_noise());
        assert!(
            LinearMeanField::new(2, 1, vec![0.0; 3], vec![0.0; 4], vec![0.0; 2], None).is_err()
        );
    }

    #[test]
    fn constant_coefficients_have_zero_l1() {
        let model = LinearMeanField::isotropic(2, 0.0, 0.0, 1.0);
        let rep = lipschitz_probe(&model, &ProbeSampler::new(1, 2), 20).unwrap();
        assert_eq!(rep.l1_hat, 0.0);
        assert!(rep.falsified.is_empty());
    }

    #[test]
    fn pure_state_feedback_l1_is_two() {
        let model = LinearMeanField::scalar(2.0, 0.0, 0.0);
        let sampler = ProbeSampler {
            fixed_measure: true,
            ..ProbeSampler::new(5, 1)
        };
        let rep = lipschitz_probe(&model, &sampler, 40).unwrap();
        assert!((rep.l1_hat - 2.0).abs() < 1e-12, "{rep:?}");
        assert!(rep.falsified.is_empty());
    }

    #[test]
    fn quadratic_drift_falsifies_small_l1() {
        let model = CustomCoefficients::new(
            1,
            1,
            |_, x, _, out| out[0] = x[0] * x[0],
            |_, _, _, out| out[0] = 0.0,
        )
        .with_constants(DeclaredConstants {
            l1: Some(19.0),
            ..Default::default()
        });
        let sampler = ProbeSampler {
            radius: 10.0,
            fixed_measure: true,
            ..ProbeSampler::new(2, 1)
        };
        let rep = lipschitz_probe(&model, &sampler, 200).unwrap();
        assert!(rep.l1_hat > 19.0, "{rep:?}");
        assert_eq!(rep.falsified, vec!["L1"]);
        let w = rep.l1_witness.unwrap();
        assert!((w.x[0] + w.y.unwrap()[0]).abs() > 19.0);
    }

    #[test]
    fn sampler_dimension_mismatch() {
        let model = LinearMeanField::scalar(1.0, 0.0, 1.0);
        assert!(matches!(
            lipschitz_probe(&model, &ProbeSampler::new(0, 2), 4),
            Err(CoefficientError::Dimension(_))
        ));
    }

    #[test]
    fn lions_check_linear_model() {
        let model = LinearMeanField::new(
            2,
            2,
            vec![0.3; 4],
            vec![1.0, -2.0, 0.5, 4.0],
            vec![1.0, 0.0, 0.0, 1.0],
            None,
        )
        .unwrap();
        let mu = EmpiricalMeasure::uniform(2, vec![0.1, 0.2, -1.0, 3.0, 2.0, 2.0]).unwrap();
        let rep = lions_fd_check(
            &model,
            0.0,
            &[1.0, 1.0],
            &mu,
            |_, o| o.copy_from_slice(&[1.0, -1.0]),
            &[1e-1, 1e-2, 1e-3],
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!((rep.analytic[0] - 3.0).abs() < 1e-15);
        assert!((rep.analytic[1] + 3.5).abs() < 1e-15);
        assert!(rep.discrepancies.iter().all(|d| *d < 1e-9));
    }

    #[test]
    fn lions_check_mean_squared() {
        let mu = EmpiricalMeasure::dirac(&[2.0]).unwrap();
        let rep = lions_fd_check(
            &mean_squared(),
            0.0,
            &[0.0],
            &mu,
            |_, o| o[0] = 1.0,
            &[1e-1, 1e-2, 1e-3],
        )
        .unwrap();
        assert_eq!(rep.analytic, vec![4.0]);
        // finite difference is 4 + ε: first-order discrepancy, extrapolates to 0
        assert!((rep.discrepancies[0] - 0.1).abs() < 1e-12);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn lions_check_measure_free_drift() {
        let model = CustomCoefficients::new(
            1,
            1,
            |_, x, _, o| o[0] = x[0].sin(),
            |_, _, _, o| o[0] = 1.0,
        )
        .with_lions(|_, _, _, _, o| o[0] = 0.0);
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 1.0, 5.0]).unwrap();
        let rep = lions_fd_check(
            &model,
            0.0,
            &[0.4],
            &mu,
            |y, o| o[0] = y[0] * y[0],
            &[0.5, 0.25],
        )
        .unwrap();
        assert_eq!(rep.extrapolated, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn lions_check_rejects_bad_steps() {
        let mu = EmpiricalMeasure::dirac(&[2.0]).unwrap();
        assert!(lions_fd_check(
            &mean_squared(),
            0.0,
            &[0.0],
            &mu,
            |_, o| o[0] = 1.0,
            &[1e-2, 1e-1]
        )
        .is_err());
        let no_lions =
            CustomCoefficients::new(1, 1, |_, _, _, o| o[0] = 0.0, |_, _, _, o| o[0] = 0.0);
        assert!(matches!(
            lions_fd_check(&no_lions, 0.0, &[0.0], &mu, |_, o| o[0] = 1.0, &[1e-2]),
            Err(CoefficientError::Missing("lions_b"))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn builtin_constants_never_falsified(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            s0 in proptest::collection::vec(-2.0f64..2.0, 4),
            s1 in proptest::collection::vec(-1.0f64..1.0, 8),
            seed in any::<u64>(),
            n in 2usize..12,
        ) {
            let model = LinearMeanField::new(2, 2, a, b, s0, Some(s1)).unwrap();
            let sampler = ProbeSampler { radius: 5.0, atoms: 4, ..ProbeSampler::new(seed, 2) };
            let rep = lipschitz_probe(&model, &sampler, n).unwrap();
            prop_assert!(rep.falsified.is_empty(), "{:?} vs {:?}", rep, model.constants());
        }

        #[test]
        fn builtin_lions_check_exact(
            pts in proptest::collection::vec(-10.0f64..10.0, 1..200),
            bbar in -5.0f64..5.0,
            c in -3.0f64..3.0,
        ) {
            let model = LinearMeanField::scalar(0.7, bbar, 1.0);
            let mu = EmpiricalMeasure::uniform(1, pts).unwrap();
            let rep = lions_fd_check(&model, 0.0, &[0.2], &mu, |_, o| o[0] = c, &[1e-1, 1e-2]).unwrap();
            prop_assert!(rep.passed, "{:?}", rep);
        }
    }
}
