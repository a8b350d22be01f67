use rayon::prelude::*;

use super::{GridKernel, KernelError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolventMethod {
    /// Partial sums of `R_1 = K`, `R_{n+1} = K * R_n`, stopped once
    /// `sup_t ∫ |R_n(t, s)| ds <= tol` or after `max_terms` terms.
    Series { max_terms: usize, tol: f64 },
    /// Forward substitution of `R = K + K * R`, row by row.
    Direct,
}

impl Default for ResolventMethod {
    fn default() -> Self {
        Self::Series {
            max_terms: 200,
            tol: 1e-10,
        }
    }
}

/// Resolvent of a grid kernel.
///
/// Both methods solve the same discrete identity: the grid convolution is a
/// product of strictly lower-triangular matrices, so the series is the
/// Neumann expansion of the direct solve and the two agree up to the series
/// truncation.
pub fn resolvent(k: &GridKernel, method: ResolventMethod) -> Result<GridKernel, KernelError> {
    let mass = k.sup_row_mass();
    if !mass.is_finite() {
        return Err(KernelError::NotIntegrableOnGrid);
    }
    match method {
        ResolventMethod::Direct => Ok(direct(k)),
        ResolventMethod::Series { max_terms, tol } => series(k, max_terms.max(1), tol),
    }
}

fn direct(k: &GridKernel) -> GridKernel {
    let grid = k.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut r = GridKernel::zero(grid);
    // R[i][j] = K[i][j] + Δ Σ_{j<m<i} K[i][m] R[m][j]; rows m < i are final.
    for i in 1..=n {
        let mut row = k.row(i).to_vec();
        let krow = k.row(i);
        let mut acc = vec![0.0; i];
        for (m, &kv) in krow.iter().enumerate().skip(1) {
            if kv == 0.0 {
                continue;
            }
            for (a, &rv) in acc[..m].iter_mut().zip(r.row(m)) {
                *a += kv * rv;
            }
        }
        for (x, a) in row.iter_mut().zip(&acc) {
            *x += dt * a;
        }
        r.row_mut(i).copy_from_slice(&row);
    }
    r
}

fn series(k: &GridKernel, max_terms: usize, tol: f64) -> Result<GridKernel, KernelError> {
    let first_mass = k.sup_row_mass();
    let mut sum = k.clone();
    let mut term = k.clone();
    let mut mass = first_mass;
    let mut terms = 1;
    while mass > tol && terms < max_terms {
        term = k.convolve(&term)?;
        mass = term.sup_row_mass();
        if !mass.is_finite() {
            return Err(KernelError::Divergence {
                terms,
                last_mass: mass,
            });
        }
        sum.add_assign(&term)?;
        terms += 1;
    }
    if mass > tol && mass >= first_mass && first_mass > 0.0 {
        return Err(KernelError::Divergence {
            terms,
            last_mass: mass,
        });
    }
    Ok(sum)
}

/// Sup-norm defects of the two resolvent identities `R = K + K * R` and
/// `R = K + R * K` on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityDefect {
    pub left: f64,
    pub right: f64,
}

pub fn resolvent_identity_defect(
    k: &GridKernel,
    r: &GridKernel,
) -> Result<IdentityDefect, KernelError> {
    let kr = k.convolve(r)?;
    let rk = r.convolve(k)?;
    let mut left = r.sub(k)?;
    let mut right = left.clone();
    left = left.sub(&kr)?;
    right = right.sub(&rk)?;
    Ok(IdentityDefect {
        left: left.max_abs(),
        right: right.max_abs(),
    })
}

/// Multiplier `c` of the slack `c · Δ · ‖g‖_∞` allowed in [`gronwall_check`].
pub const GRONWALL_SLACK_FACTOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GronwallReport {
    /// Grid solution of `f = g + K * f`.
    pub f: Vec<f64>,
    /// `g + R * g` with the directly computed resolvent.
    pub bound: Vec<f64>,
    pub slack: f64,
    pub satisfied: bool,
    /// `max_i |f_i - bound_i|`.
    pub max_gap: f64,
}

/// Builds the extremal solution of `f <= g + K * f` and compares it with the
/// resolvent bound `g + R * g`.
pub fn gronwall_check(k: &GridKernel, g: &[f64]) -> Result<GronwallReport, KernelError> {
    let grid = k.grid();
    let n = grid.n_steps();
    if g.len() != n + 1 {
        return Err(KernelError::GridMismatch);
    }
    if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(KernelError::NegativeInput { index, value });
    }
    let dt = grid.dt();
    let mut f = vec![0.0; n + 1];
    for i in 0..=n {
        let conv: f64 = k.row(i).iter().zip(&f).map(|(w, x)| w * x).sum();
        f[i] = g[i] + dt * conv;
    }
    let r = resolvent(k, ResolventMethod::Direct)?;
    let rg = r.apply(g);
    let bound: Vec<f64> = g.iter().zip(&rg).map(|(a, b)| a + b).collect();
    let g_max = g.iter().fold(0.0f64, |m, v| m.max(*v));
    let slack = GRONWALL_SLACK_FACTOR * dt * g_max;
    let satisfied = f.iter().zip(&bound).all(|(a, b)| *a <= b + slack);
    let max_gap = f
        .par_iter()
        .zip(&bound)
        .map(|(a, b)| (a - b).abs())
        .reduce(|| 0.0, f64::max);
    Ok(GronwallReport {
        f,
        bound,
        slack,
        satisfied,
        max_gap,
    })
}
