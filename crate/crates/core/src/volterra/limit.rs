use crate::measures::EmpiricalMeasure;

use super::{ControlForm, ControlPath, GridPath, Scheme, VolterraError, OVERFLOW_GUARD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LimitMethod {
    /// Successive approximation of the whole path, stopped when the sup-norm
    /// change drops to `tol`.
    Picard { max_iter: usize, tol: f64 },
    /// Forward marching over the already computed history; the exact fixed
    /// point of the discrete equation in one pass.
    Stepping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSolution {
    pub path: GridPath,
    pub iterations: usize,
    /// Last sup-norm change (zero for stepping).
    pub residual: f64,
}

fn guard(step: usize, x: &[f64]) -> Result<(), VolterraError> {
    let worst = x.iter().fold(0.0f64, |m, v| {
        if v.is_nan() {
            f64::INFINITY
        } else {
            m.max(v.abs())
        }
    });
    if worst > OVERFLOW_GUARD {
        return Err(VolterraError::Blowup {
            step,
            particle: 0,
            value: worst,
        });
    }
    Ok(())
}

/// `X⁰_t = ξ + ∫_0^t K1(t, s) b(s, X⁰_s, δ_{X⁰_s}) ds` on the scheme grid.
pub fn solve_deterministic_limit(
    scheme: &Scheme,
    xi: &[f64],
    method: LimitMethod,
) -> Result<LimitSolution, VolterraError> {
    let (d, _) = scheme.dims();
    if xi.len() != d {
        return Err(VolterraError::InvalidParameter(format!(
            "initial condition has dimension {}, model has d = {d}",
            xi.len()
        )));
    }
    let grid = scheme.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let coeffs = scheme.coeffs();
    let w1 = scheme.w1();
    let drift_at = |i: usize, x: &[f64], out: &mut [f64]| -> Result<(), VolterraError> {
        coeffs.drift(grid.time(i), x, &EmpiricalMeasure::dirac(x)?, out);
        Ok(())
    };
    match method {
        LimitMethod::Stepping => {
            let mut values = vec![0.0; (n + 1) * d];
            values[..d].copy_from_slice(xi);
            let mut b = vec![0.0; n * d];
            for i in 0..n {
                let (head, _) = values.split_at((i + 1) * d);
                drift_at(i, &head[i * d..], &mut b[i * d..(i + 1) * d])?;
                let row = w1.row(i + 1);
                for c in 0..d {
                    let s: f64 = row.iter().enumerate().map(|(k, w)| w * b[k * d + c]).sum();
                    values[(i + 1) * d + c] = xi[c] + dt * s;
                }
                guard(i + 1, &values[(i + 1) * d..(i + 2) * d])?;
            }
            Ok(LimitSolution {
                path: GridPath::new(grid, d, values)?,
                iterations: 1,
                residual: 0.0,
            })
        }
        LimitMethod::Picard { max_iter, tol } => {
            let mut current = GridPath::constant(grid, xi).values().to_vec();
            let mut b = vec![0.0; n * d];
            let mut residual = f64::INFINITY;
            for iter in 1..=max_iter.max(1) {
                for i in 0..n {
                    drift_at(i, &current[i * d..(i + 1) * d], &mut b[i * d..(i + 1) * d])?;
                }
                let mut next = vec![0.0; (n + 1) * d];
                next[..d].copy_from_slice(xi);
                for i in 1..=n {
                    let row = w1.row(i);
                    for c in 0..d {
                        let s: f64 = row.iter().enumerate().map(|(k, w)| w * b[k * d + c]).sum();
                        next[i * d + c] = xi[c] + dt * s;
                    }
                    guard(i, &next[i * d..(i + 1) * d])?;
                }
                residual = next
                    .iter()
                    .zip(&current)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                current = next;
                if residual <= tol {
                    return Ok(LimitSolution {
                        path: GridPath::new(grid, d, current)?,
                        iterations: iter,
                        residual,
                    });
                }
            }
            Err(VolterraError::NonConvergence {
                iterations: max_iter,
                residual,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlledMode {
    /// `φ = ξ + ∫K1 b(s, φ_s, δ_{X⁰_s}) ds + ∫Kc σ(s, φ_s, δ_{X⁰_s}) v_s ds`, `Kc = K1` by default.
    Ldp,
    /// `ψ = ∫K1 ∇b(s, X⁰_s, δ_{X⁰_s}) ψ_s ds + ∫Kc σ(s, X⁰_s, δ_{X⁰_s}) v_s ds`, `Kc = K2` by default.
    MdpLinearized,
}

/// Skeleton equations driven by a control, solved by forward substitution
/// (the discrete Picard map is strictly triangular, so this is its fixed
/// point).
pub fn solve_controlled_deterministic(
    scheme: &Scheme,
    xi: &[f64],
    control: &ControlPath,
    x0: &GridPath,
    mode: ControlledMode,
) -> Result<GridPath, VolterraError> {
    let (d, m) = scheme.dims();
    let grid = scheme.grid();
    if control.grid() != grid || control.dim() != m {
        return Err(VolterraError::GridMismatch(format!(
            "control must have dimension m = {m} on the scheme grid"
        )));
    }
    if x0.grid() != grid || x0.dim() != d {
        return Err(VolterraError::GridMismatch(
            "limit path does not match the grid".into(),
        ));
    }
    if mode == ControlledMode::Ldp && xi.len() != d {
        return Err(VolterraError::InvalidParameter(format!(
            "initial condition has dimension {}, model has d = {d}",
            xi.len()
        )));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let coeffs = scheme.coeffs();
    let w1 = scheme.w1();
    let form = match mode {
        ControlledMode::Ldp => ControlForm::Ldp,
        ControlledMode::MdpLinearized => ControlForm::Mdp,
    };
    let wc = scheme.wc(form);
    let start: Vec<f64> = match mode {
        ControlledMode::Ldp => xi.to_vec(),
        ControlledMode::MdpLinearized => vec![0.0; d],
    };
    let mut values = vec![0.0; (n + 1) * d];
    values[..d].copy_from_slice(&start);
    let mut drift = vec![0.0; n * d];
    let mut ctrl = vec![0.0; n * d];
    let mut sigma = vec![0.0; d * m];
    let mut jac = vec![0.0; d * d];
    for i in 0..n {
        let t = grid.time(i);
        let anchor = x0.state(i);
        let law = EmpiricalMeasure::dirac(anchor)?;
        let state = values[i * d..(i + 1) * d].to_vec();
        match mode {
            ControlledMode::Ldp => {
                coeffs.drift(t, &state, &law, &mut drift[i * d..(i + 1) * d]);
                coeffs.diffusion(t, &state, &law, &mut sigma);
            }
            ControlledMode::MdpLinearized => {
                coeffs.drift_jacobian(t, anchor, &law, &mut jac)?;
                for r in 0..d {
                    drift[i * d + r] = (0..d).map(|k| jac[r * d + k] * state[k]).sum();
                }
                coeffs.diffusion(t, anchor, &law, &mut sigma);
            }
        }
        let v = control.value(i);
        for r in 0..d {
            ctrl[i * d + r] = sigma[r * m..(r + 1) * m]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let (r1, rc) = (w1.row(i + 1), wc.row(i + 1));
        for c in 0..d {
            let s1: f64 = r1
                .iter()
                .enumerate()
                .map(|(k, w)| w * drift[k * d + c])
                .sum();
            let sc: f64 = rc
                .iter()
                .enumerate()
                .map(|(k, w)| w * ctrl[k * d + c])
                .sum();
            let mut acc = dt * s1;
            acc += dt * sc;
            values[(i + 1) * d + c] = start[c] + acc;
        }
        guard(i + 1, &values[(i + 1) * d..(i + 2) * d])?;
    }
    GridPath::new(grid, d, values)
}
