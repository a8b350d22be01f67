//! Volterra kernels `K(t, s)` on the simplex `0 <= s < t`, their grid
//! discretisation, convolution algebra, resolvents and regularity probes.

mod grid;
mod probe;
mod resolvent;
mod tabulated;

pub use grid::{Grid, GridKernel};
pub use probe::{
    class_k_check, default_steps, regularity_probe, ClassKReport, ClassKStatus, RegularityEstimate,
};
pub use resolvent::{
    gronwall_check, resolvent, resolvent_identity_defect, GronwallReport, IdentityDefect,
    ResolventMethod, GRONWALL_SLACK_FACTOR,
};
pub use tabulated::TabulatedKernel;

use std::fmt;
use std::sync::{Arc, OnceLock};

use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::quadrature::{Node, TanhSinh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel evaluated outside the simplex: t = {t}, s = {s}")]
    Domain { t: f64, s: f64 },
    #[error("kernel is not finite at t = {t}, s = {s}")]
    Singular { t: f64, s: f64 },
    #[error("K^{power} is not integrable near the diagonal (exponent {exponent})")]
    NonIntegrable { power: u32, exponent: f64 },
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch between kernels")]
    GridMismatch,
    #[error("resolvent series did not decay after {terms} terms (last term mass {last_mass})")]
    Divergence { terms: usize, last_mass: f64 },
    #[error("input path must be nonnegative (index {index}, value {value})")]
    NegativeInput { index: usize, value: f64 },
    #[error("kernel row integrals are not finite on the grid")]
    NotIntegrableOnGrid,
    #[error("tabulated kernel: {0}")]
    Table(String),
}

pub type CustomFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelFamily {
    /// `K(t, s) = c`.
    Constant(f64),
    /// `K(t, s) = (t - s)^{H - 1/2}`.
    Power {
        hurst: f64,
    },
    /// Representation kernel of fractional Brownian motion with Hurst index `H`.
    Fbm {
        hurst: f64,
    },
    Tabulated(Arc<TabulatedKernel>),
    Custom(CustomFn),
}

impl fmt::Debug for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Power { hurst } => write!(f, "Power {{ hurst: {hurst} }}"),
            Self::Fbm { hurst } => write!(f, "Fbm {{ hurst: {hurst} }}"),
            Self::Tabulated(t) => write!(f, "Tabulated({} points)", t.len()),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A kernel together with a multiplicative scale and singularity metadata.
#[derive(Debug, Clone)]
pub struct Kernel {
    family: KernelFamily,
    scale: f64,
    singular_at_diagonal: bool,
    holder_exponent_hint: Option<f64>,
}

/// Relative tolerance of the inner fBm integral.
pub const FBM_INNER_TOL: f64 = 1e-8;
/// Relative tolerance used for kernel integrals and averaged weights.
pub const INTEGRAL_TOL: f64 = 1e-10;

impl Kernel {
    pub fn constant(c: f64) -> Self {
        Self {
            family: KernelFamily::Constant(c),
            scale: 1.0,
            singular_at_diagonal: false,
            holder_exponent_hint: Some(0.5),
        }
    }

    pub fn power(hurst: f64) -> Result<Self, KernelError> {
        if !(hurst > 0.0 && hurst.is_finite()) {
            return Err(KernelError::InvalidParameter(format!(
                "power kernel needs H > 0, got {hurst}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Power { hurst },
            scale: 1.0,
            singular_at_diagonal: hurst < 0.5,
            holder_exponent_hint: Some(hurst),
        })
    }

    pub fn fbm(hurst: f64) -> Result<Self, KernelError> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(KernelError::InvalidParameter(format!(
                "fbm kernel needs H in (0, 1), got {hurst}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Fbm { hurst },
            scale: 1.0,
            singular_at_diagonal: hurst < 0.5,
            holder_exponent_hint: Some(hurst),
        })
    }

    pub fn tabulated(table: TabulatedKernel) -> Self {
        Self {
            family: KernelFamily::Tabulated(Arc::new(table)),
            scale: 1.0,
            singular_at_diagonal: false,
            holder_exponent_hint: None,
        }
    }

    pub fn custom<F>(f: F, singular_at_diagonal: bool, holder_exponent_hint: Option<f64>) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            family: KernelFamily::Custom(Arc::new(f)),
            scale: 1.0,
            singular_at_diagonal,
            holder_exponent_hint,
        }
    }

    /// Riemann-Liouville kernel `(t - s)^{alpha - 1} / Gamma(alpha)`.
    pub fn riemann_liouville(alpha: f64) -> Result<Self, KernelError> {
        Ok(Self::power(alpha - 0.5)?.scaled(1.0 / gamma(alpha)))
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale *= factor;
        self
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn singular_at_diagonal(&self) -> bool {
        self.singular_at_diagonal
    }

    pub fn holder_exponent_hint(&self) -> Option<f64> {
        self.holder_exponent_hint
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0 || matches!(self.family, KernelFamily::Constant(c) if c == 0.0)
    }

    /// `K(t, s)` for `0 <= s < t`.
    pub fn eval(&self, t: f64, s: f64) -> Result<f64, KernelError> {
        if !(s >= 0.0 && s < t && t.is_finite()) {
            return Err(KernelError::Domain { t, s });
        }
        let v = self.eval_gap(t, s, t - s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(KernelError::Singular { t, s })
        }
    }

    /// Evaluation with the distance `gap = t - s` supplied by the caller, so
    /// quadrature nodes within rounding of the diagonal keep their precision.
    pub(crate) fn eval_gap(&self, t: f64, s: f64, gap: f64) -> f64 {
        self.scale
            * match &self.family {
                KernelFamily::Constant(c) => *c,
                KernelFamily::Power { hurst } => gap.powf(hurst - 0.5),
                KernelFamily::Fbm { hurst } => fbm_value(*hurst, s, gap),
                KernelFamily::Tabulated(table) => table.eval(t, s),
                KernelFamily::Custom(f) => f(t, s),
            }
    }

    /// `∫_a^b K(t, s)^power ds` for `0 <= a <= b <= t`.
    pub fn integrate(&self, t: f64, a: f64, b: f64, power: u32) -> Result<f64, KernelError> {
        if !(0.0 <= a && a <= b && b <= t) {
            return Err(KernelError::Domain { t, s: a });
        }
        if power != 1 && power != 2 {
            return Err(KernelError::InvalidParameter(format!(
                "power must be 1 or 2, got {power}"
            )));
        }
        let p = power as i32;
        let scale_p = self.scale.powi(p);
        match &self.family {
            KernelFamily::Constant(c) => Ok(scale_p * c.powi(p) * (b - a)),
            KernelFamily::Power { hurst } => {
                let exponent = p as f64 * (hurst - 0.5);
                if exponent <= -1.0 {
                    return Err(KernelError::NonIntegrable { power, exponent });
                }
                Ok(scale_p * power_antiderivative(exponent, t - a, t - b))
            }
            KernelFamily::Fbm { hurst } if power == 1 => {
                let h = *hurst;
                let analytic = fbm_constant(h) * power_antiderivative(h - 0.5, t - a, t - b);
                let correction = if h == 0.5 {
                    0.0
                } else {
                    self.quadrature(a, b, t, |s, gap| fbm_correction(h, s, gap))?
                };
                Ok(self.scale * (analytic + correction))
            }
            _ => {
                let v = self.quadrature(a, b, t, |s, gap| {
                    let k = self.eval_gap(t, s, gap);
                    if p == 1 {
                        k
                    } else {
                        k * k
                    }
                })?;
                Ok(v)
            }
        }
    }

    /// Averaged weight `(1/(b - a)) ∫_a^b K(t, s) ds` over a grid cell with
    /// `b <= t`. Interior cells use an 8-point Gauss-Legendre rule, cells
    /// touching `s = 0` or the diagonal use tanh-sinh.
    pub(crate) fn cell_average(&self, t: f64, a: f64, b: f64) -> Result<f64, KernelError> {
        let width = b - a;
        match &self.family {
            KernelFamily::Constant(c) => Ok(self.scale * c),
            KernelFamily::Power { hurst } => {
                Ok(self.scale * power_antiderivative(hurst - 0.5, t - a, t - b) / width)
            }
            KernelFamily::Fbm { hurst } => {
                let h = *hurst;
                let analytic = fbm_constant(h) * power_antiderivative(h - 0.5, t - a, t - b);
                if h == 0.5 {
                    return Ok(self.scale * analytic / width);
                }
                let correction = self.cell_integral(t, a, b, |s, gap| fbm_correction(h, s, gap))?;
                Ok(self.scale * (analytic + correction) / width)
            }
            _ => {
                let v = self.cell_integral(t, a, b, |s, gap| self.eval_gap(t, s, gap))?;
                Ok(v / width)
            }
        }
    }

    fn cell_integral<F>(&self, t: f64, a: f64, b: f64, f: F) -> Result<f64, KernelError>
    where
        F: Fn(f64, f64) -> f64,
    {
        let width = b - a;
        let touches_edge = a <= 0.0 || t - b <= 1e-9 * width;
        if touches_edge {
            return self.quadrature(a, b, t, f);
        }
        let (nodes, weights) = gauss_legendre_8();
        let mid = 0.5 * (a + b);
        let half = 0.5 * width;
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            let s = mid + half * x;
            acc += w * f(s, t - s);
        }
        let v = half * acc;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(KernelError::Singular { t, s: a })
        }
    }

    /// Tanh-sinh over `[a, b]` of `f(s, t - s)`; `b` may coincide with `t`.
    fn quadrature<F>(&self, a: f64, b: f64, t: f64, f: F) -> Result<f64, KernelError>
    where
        F: Fn(f64, f64) -> f64,
    {
        let rule = TanhSinh::with_rel_tol(INTEGRAL_TOL);
        let tail = t - b;
        // A node whose abscissa rounds onto a singular endpoint is useless
        // for kernels that only see `(t, s)`; drop it.
        let r = rule.integrate(a, b, |n: Node| {
            let v = f(n.x, tail + n.from_right);
            if !v.is_finite() && (n.x <= a || n.x >= b) {
                0.0
            } else {
                v
            }
        });
        if r.value.is_finite() {
            Ok(r.value)
        } else {
            Err(KernelError::Singular { t, s: a })
        }
    }
}

/// `∫ (t - s)^e ds` over `[a, b]`, written through `upper = t - a`,
/// `lower = t - b`.
fn power_antiderivative(exponent: f64, upper: f64, lower: f64) -> f64 {
    let e1 = exponent + 1.0;
    (upper.powf(e1) - lower.max(0.0).powf(e1)) / e1
}

/// `c_H = (2H Γ(3/2 - H) / (Γ(H + 1/2) Γ(2 - 2H)))^{1/2}`.
pub fn fbm_constant(hurst: f64) -> f64 {
    (2.0 * hurst * gamma(1.5 - hurst) / (gamma(hurst + 0.5) * gamma(2.0 - 2.0 * hurst))).sqrt()
}

fn fbm_value(hurst: f64, s: f64, gap: f64) -> f64 {
    if hurst == 0.5 {
        return 1.0;
    }
    fbm_constant(hurst) * gap.powf(hurst - 0.5) + fbm_correction(hurst, s, gap)
}

/// `c_H (1/2 - H) ∫_s^t (θ - s)^{H - 3/2} (1 - (s/θ)^{1/2 - H}) dθ`.
///
/// With `θ = s + (t - s) x` and `r = (t - s)/s` the integral becomes
/// `(t - s)^{H - 1/2} ∫_0^1 x^{H - 3/2} (1 - (1 + r x)^{H - 1/2}) dx`, split
/// at `x = 1/r` when `r > 1`.
fn fbm_correction(hurst: f64, s: f64, gap: f64) -> f64 {
    if s <= 0.0 {
        return f64::INFINITY;
    }
    let a = hurst - 0.5;
    // ratios beyond this are clamped; they only arise for s/t < 1e-200
    let r = (gap / s).min(1e200);
    let integrand = |x: f64| x.powf(a - 1.0) * -(a * (r * x).ln_1p()).exp_m1();
    let mut rule = TanhSinh::with_rel_tol(FBM_INNER_TOL);
    rule.max_level = 10;
    let j = if r > 1.0 {
        let cut = 1.0 / r;
        rule.integrate(0.0, cut, |n: Node| integrand(n.from_left))
            .value
            + rule.integrate(cut, 1.0, |n: Node| integrand(n.x)).value
    } else {
        rule.integrate(0.0, 1.0, |n: Node| integrand(n.from_left))
            .value
    };
    fbm_constant(hurst) * (0.5 - hurst) * gap.powf(a) * j
}

fn gauss_legendre_8() -> &'static ([f64; 8], [f64; 8]) {
    static RULE: OnceLock<([f64; 8], [f64; 8])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 8usize;
        let mut nodes = [0.0; 8];
        let mut weights = [0.0; 8];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}
