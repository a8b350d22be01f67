use nalgebra::DMatrix;

use crate::measures::EmpiricalMeasure;
use crate::volterra::{solve_controlled_deterministic, ControlForm, ControlPath, ControlledMode};

use super::{
    ControlSystem, DeviationError, RateMode, RateProblem, RateSolution, AUTO_REGULARIZATION,
    RESIDUAL_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LdpSolver {
    /// Direct forward substitution on the block-triangular system.
    Triangular,
    /// Gradient descent on `½‖A v - g‖²` from `v = 0`, with the gradient
    /// formed by the adjoint sweep. `step = None` uses `1/‖A‖²`.
    Descent {
        max_iter: usize,
        step: Option<f64>,
        tol: f64,
    },
}

/// `Λ(ψ)`: cheapest control driving the linearized skeleton onto `ψ`.
pub fn mdp_rate(problem: &RateProblem) -> Result<RateSolution, DeviationError> {
    if problem.mode != RateMode::Mdp {
        return Err(DeviationError::InvalidParameter(
            "mdp_rate needs an mdp problem".into(),
        ));
    }
    solve(problem, LdpSolver::Triangular)
}

/// `I(φ)`: cheapest control driving the controlled skeleton onto `φ`. Once
/// `φ` is fixed the constraint is affine in `v`, so no outer iteration is
/// needed.
pub fn ldp_rate(problem: &RateProblem, solver: LdpSolver) -> Result<RateSolution, DeviationError> {
    if problem.mode != RateMode::Ldp {
        return Err(DeviationError::InvalidParameter(
            "ldp_rate needs an ldp problem".into(),
        ));
    }
    solve(problem, solver)
}

fn solve(problem: &RateProblem, solver: LdpSolver) -> Result<RateSolution, DeviationError> {
    problem.validate()?;
    let scheme = &problem.scheme;
    let (d, m) = scheme.dims();
    let grid = scheme.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let coeffs = scheme.coeffs();
    let w1 = scheme.w1();
    let target = &problem.target;

    // forcing terms f_k and diffusions S_k along the target
    let mut f = vec![0.0; n * d];
    let mut s = vec![0.0; n * d * m];
    let mut jac = vec![0.0; d * d];
    for k in 0..n {
        let t = grid.time(k);
        let anchor = problem.x0.state(k);
        let law = EmpiricalMeasure::dirac(anchor)?;
        let y = target.state(k);
        let fk = &mut f[k * d..(k + 1) * d];
        match problem.mode {
            RateMode::Ldp => {
                coeffs.drift(t, y, &law, fk);
                coeffs.diffusion(t, y, &law, &mut s[k * d * m..(k + 1) * d * m]);
            }
            RateMode::Mdp => {
                coeffs.drift_jacobian(t, anchor, &law, &mut jac)?;
                for (r, o) in fk.iter_mut().enumerate() {
                    *o = (0..d).map(|c| jac[r * d + c] * y[c]).sum();
                }
                coeffs.diffusion(t, anchor, &law, &mut s[k * d * m..(k + 1) * d * m]);
            }
        }
    }
    let start = target.state(0);
    let mut g = vec![0.0; n * d];
    for i in 1..=n {
        let row = w1.row(i);
        for c in 0..d {
            let drift: f64 = row.iter().enumerate().map(|(k, w)| w * f[k * d + c]).sum();
            g[(i - 1) * d + c] = target.state(i)[c] - start[c] - dt * drift;
        }
    }
    let form = match problem.mode {
        RateMode::Ldp => ControlForm::Ldp,
        RateMode::Mdp => ControlForm::Mdp,
    };
    let system = ControlSystem {
        n,
        d,
        m,
        dt,
        wc: scheme.wc(form),
        s,
    };

    let (v, lambda, iterations) = match solver {
        LdpSolver::Triangular => invert(&system, &g, problem.regularization)?,
        LdpSolver::Descent {
            max_iter,
            step,
            tol,
        } => descend(&system, &g, max_iter, step, tol),
    };
    let control = ControlPath::new(grid, m, v)?;
    let mode = match problem.mode {
        RateMode::Ldp => ControlledMode::Ldp,
        RateMode::Mdp => ControlledMode::MdpLinearized,
    };
    let pushed = solve_controlled_deterministic(scheme, start, &control, &problem.x0, mode)?;
    let residual = pushed.sup_distance(target)?;
    let tol = RESIDUAL_TOL * (1.0 + target.sup_norm());
    let attained = residual <= tol;
    let diagnostic = (!attained).then(|| {
        format!("residual {residual:.3e} exceeds {tol:.3e}: target is not reachable by the control map on this grid")
    });
    Ok(RateSolution {
        rate: control.energy(),
        v_star: control,
        residual,
        attained,
        regularization_used: lambda,
        iterations,
        diagnostic,
    })
}

/// Numerical rank and pseudo-inverse of a `d × m` block.
fn pseudo_inverse(d: usize, m: usize, block: &[f64]) -> (usize, DMatrix<f64>) {
    let mat = DMatrix::from_row_slice(d, m, block);
    let svd = mat.svd(true, true);
    let top = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = 1e-12 * top.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    let pinv = svd
        .pseudo_inverse(cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(m, d));
    (rank, pinv)
}

/// Minimum-norm solution of `A v = g`. Without regularization the system is
/// solved for `u_k = S_k v_k` by forward substitution and then
/// `v_k = S_k⁺ u_k`; with it, the dense normal equations
/// `(AᵀA + λ I) v = Aᵀ g` are used.
fn invert(
    system: &ControlSystem<'_>,
    g: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, f64, usize), DeviationError> {
    let (n, d, m) = (system.n, system.d, system.m);
    if lambda > 0.0 {
        return tikhonov(system, g, lambda).map(|v| (v, lambda, 1));
    }
    let zero_diagonal = (1..=n).any(|i| system.wc.get(i, i - 1) == 0.0);
    if zero_diagonal {
        let a = system.dense();
        let normal = a.transpose() * &a;
        let auto = AUTO_REGULARIZATION * normal.norm();
        return tikhonov(system, g, auto).map(|v| (v, auto, 1));
    }
    let mut pinvs = Vec::with_capacity(n);
    for k in 0..n {
        let (rank, pinv) = pseudo_inverse(d, m, system.block(k));
        if rank < d {
            return Err(DeviationError::RankDeficient { step: k, rank, d });
        }
        pinvs.push(pinv);
    }
    let mut u = vec![0.0; n * d];
    for i in 1..=n {
        let row = system.wc.row(i);
        let diag = system.dt * row[i - 1];
        for c in 0..d {
            let history: f64 = row[..i - 1]
                .iter()
                .enumerate()
                .map(|(k, w)| w * u[k * d + c])
                .sum();
            u[(i - 1) * d + c] = (g[(i - 1) * d + c] - system.dt * history) / diag;
        }
    }
    let mut v = vec![0.0; n * m];
    for (k, pinv) in pinvs.iter().enumerate() {
        for j in 0..m {
            v[k * m + j] = (0..d).map(|r| pinv[(j, r)] * u[k * d + r]).sum();
        }
    }
    Ok((v, 0.0, 1))
}

fn tikhonov(
    system: &ControlSystem<'_>,
    g: &[f64],
    lambda: f64,
) -> Result<Vec<f64>, DeviationError> {
    let a = system.dense();
    let at = a.transpose();
    let mut normal = &at * &a;
    for i in 0..normal.nrows() {
        normal[(i, i)] += lambda;
    }
    let rhs = at * nalgebra::DVector::from_column_slice(g);
    let chol = normal.cholesky().ok_or_else(|| {
        DeviationError::Numerical("regularized normal matrix is not positive definite".into())
    })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Largest eigenvalue of `AᵀA` by power iteration.
fn normal_spectral_radius(system: &ControlSystem<'_>) -> f64 {
    let mut x = vec![1.0; system.n * system.m];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let y = system.adjoint(&system.apply(&x));
        let next = y.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        x = y;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

fn descend(
    system: &ControlSystem<'_>,
    g: &[f64],
    max_iter: usize,
    step: Option<f64>,
    tol: f64,
) -> (Vec<f64>, f64, usize) {
    let step = step
        .unwrap_or_else(|| 1.0 / (1.05 * normal_spectral_radius(system)).max(f64::MIN_POSITIVE));
    let mut v = vec![0.0; system.n * system.m];
    let scale = 1.0 + system.adjoint(g).iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let mut r = system.apply(&v);
        r.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
        let grad = system.adjoint(&r);
        if grad.iter().map(|x| x * x).sum::<f64>().sqrt() <= tol * scale {
            break;
        }
        v.iter_mut().zip(&grad).for_each(|(x, gr)| *x -= step * gr);
    }
    (v, 0.0, iterations)
}
