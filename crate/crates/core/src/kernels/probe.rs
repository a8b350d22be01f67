use crate::quadrature::{Node, TanhSinh};
use crate::stats::linear_fit;

use super::{Kernel, KernelError, KernelFamily, INTEGRAL_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityEstimate {
    /// Half the log-log slope of `D(h)` against `h`.
    pub gamma: f64,
    /// Root-mean-square residual of the log-log fit.
    pub fit_residual: f64,
    /// `(h, D(h))` pairs used in the fit.
    pub samples: Vec<(f64, f64)>,
}

/// Default step list: 7 points geometric between 1e-6 and 1e-3.
pub fn default_steps() -> Vec<f64> {
    (0..7).map(|k| 1e-6 * 10f64.powf(k as f64 * 0.5)).collect()
}

/// Estimates the Hölder-type exponent `γ` in
/// `D(h) = ∫_0^t |K(t+h, s) - K(t, s)|² ds + ∫_t^{t+h} K(t+h, s)² ds ≲ h^{2γ}`.
pub fn regularity_probe(
    kernel: &Kernel,
    t: f64,
    steps: &[f64],
    horizon: f64,
) -> Result<RegularityEstimate, KernelError> {
    if steps.len() < 4 {
        return Err(KernelError::InvalidParameter(format!(
            "regularity probe needs at least 4 steps, got {}",
            steps.len()
        )));
    }
    if !(t >= 0.0 && t < horizon) {
        return Err(KernelError::Domain { t, s: 0.0 });
    }
    let mut samples = Vec::with_capacity(steps.len());
    for &h in steps {
        if !(h > 0.0 && h <= horizon - t) {
            return Err(KernelError::InvalidParameter(format!(
                "step {h} outside (0, {}]",
                horizon - t
            )));
        }
        let fresh = kernel.integrate(t + h, t, t + h, 2)?;
        let increment = increment_energy(kernel, t, h)?;
        samples.push((h, increment + fresh));
    }
    if let Some(&(h, d)) = samples.iter().find(|(_, d)| !(*d > 0.0)) {
        return Err(KernelError::InvalidParameter(format!(
            "D({h}) = {d} is not positive; exponent undefined"
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, d)| d.ln()).collect();
    let fit = linear_fit(&xs, &ys);
    Ok(RegularityEstimate {
        gamma: 0.5 * fit.slope,
        fit_residual: fit.rms_residual,
        samples,
    })
}

/// `∫_0^t |K(t+h, s) - K(t, s)|² ds`, with breakpoints at `t - h·10^k` so the
/// quadrature resolves the boundary layer of width `h` at the diagonal.
fn increment_energy(kernel: &Kernel, t: f64, h: f64) -> Result<f64, KernelError> {
    if t == 0.0 {
        return Ok(0.0);
    }
    if matches!(kernel.family(), KernelFamily::Constant(_)) {
        return Ok(0.0);
    }
    let mut cuts = vec![t];
    let mut offset = h;
    while offset < t {
        cuts.push(t - offset);
        offset *= 10.0;
    }
    cuts.push(0.0);
    cuts.reverse();
    let rule = TanhSinh::with_rel_tol(INTEGRAL_TOL);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let tail = t - b;
        let r = rule.integrate(a, b, |n: Node| {
            let gap = tail + n.from_right;
            let d = kernel.eval_gap(t + h, n.x, gap + h) - kernel.eval_gap(t, n.x, gap);
            d * d
        });
        if !r.value.is_finite() {
            return Err(KernelError::Singular { t, s: a });
        }
        total += r.value;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKStatus {
    /// Both conditions hold at every sampled point for a kernel family with
    /// known structure.
    Satisfied,
    /// A sampled value violates a condition.
    Violated,
    /// Sampled values look admissible but the kernel is user supplied, so
    /// nothing is certified.
    Unverified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassKReport {
    /// `sup_t ∫_0^t K(t, s) ds` over the sampled times.
    pub sup_row_integral: f64,
    /// `(ε, sup_t ∫_t^{t+ε} K(t+ε, s) ds)` for decreasing `ε`.
    pub diagonal_mass: Vec<(f64, f64)>,
    pub status: ClassKStatus,
}

/// Samples the two admissibility conditions of the resolvent construction:
/// bounded row integrals and diagonal mass below one as the window shrinks.
pub fn class_k_check(
    kernel: &Kernel,
    horizon: f64,
    n_times: usize,
) -> Result<ClassKReport, KernelError> {
    let n_times = n_times.max(2);
    let times: Vec<f64> = (1..=n_times)
        .map(|i| horizon * i as f64 / n_times as f64)
        .collect();
    let mut sup_row_integral = 0.0f64;
    for &t in &times {
        sup_row_integral = sup_row_integral.max(kernel.integrate(t, 0.0, t, 1)?);
    }
    let mut diagonal_mass = Vec::new();
    let mut eps = horizon * 1e-2;
    while eps >= horizon * 1e-6 {
        let mut worst = 0.0f64;
        for &t in times.iter().filter(|&&t| t + eps <= horizon) {
            worst = worst.max(kernel.integrate(t + eps, t, t + eps, 1)?);
        }
        worst = worst.max(kernel.integrate(eps, 0.0, eps, 1)?);
        diagonal_mass.push((eps, worst));
        eps *= 0.1;
    }
    let admissible =
        sup_row_integral.is_finite() && diagonal_mass.last().is_some_and(|&(_, m)| m < 1.0);
    let status = match (admissible, kernel.family()) {
        (false, _) => ClassKStatus::Violated,
        (true, KernelFamily::Custom(_) | KernelFamily::Tabulated(_)) => ClassKStatus::Unverified,
        (true, _) => ClassKStatus::Satisfied,
    };
    Ok(ClassKReport {
        sup_row_integral,
        diagonal_mass,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_kernel_gamma_half() {
        let est = regularity_probe(&Kernel::constant(2.0), 0.5, &default_steps(), 1.0).unwrap();
        assert!((est.gamma - 0.5).abs() < 1e-9, "{est:?}");
    }

    #[test]
    fn power_kernels_recover_hurst() {
        for &h in &[0.25, 0.5, 0.75] {
            let est =
                regularity_probe(&Kernel::power(h).unwrap(), 0.5, &default_steps(), 1.0).unwrap();
            assert!((est.gamma - h).abs() <= 0.02, "H={h}: {est:?}");
        }
    }

    #[test]
    fn rejects_short_step_list() {
        let err = regularity_probe(&Kernel::constant(1.0), 0.5, &[1e-3, 1e-2], 1.0);
        assert!(err.is_err());
        let err = regularity_probe(&Kernel::constant(1.0), 0.5, &[1e-3, 1e-2, 0.1, 0.6], 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn class_k_builtin_and_custom() {
        let rep = class_k_check(&Kernel::power(0.3).unwrap(), 1.0, 20).unwrap();
        assert_eq!(rep.status, ClassKStatus::Satisfied);
        let custom = Kernel::custom(|t, s| (t - s).powf(-0.2), true, None);
        let rep = class_k_check(&custom, 1.0, 20).unwrap();
        assert_eq!(rep.status, ClassKStatus::Unverified);
        let big = Kernel::custom(|t, s| 1e9 * (t - s).powf(-0.9), true, None);
        let rep = class_k_check(&big, 1.0, 5).unwrap();
        assert_eq!(rep.status, ClassKStatus::Violated);
    }
}
