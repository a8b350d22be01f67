use crate::measures::EmpiricalMeasure;
use crate::volterra::{
    solve_controlled_deterministic, ControlForm, ControlPath, ControlledMode, GridPath, Scheme,
};

use super::{DeviationError, RateMode, RateSolution, RESIDUAL_TOL};

/// Terminal event `{x : normal · x ≥ level}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub level: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, level: f64) -> Self {
        Self { normal, level }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.normal.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.value(x) >= self.level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointOptions {
    /// Descent iterations per penalty stage.
    pub max_iter: usize,
    /// First trial step of the backtracking line search.
    pub step: f64,
    pub stages: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
}

impl Default for EndpointOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step: 1.0,
            stages: 8,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
        }
    }
}

struct Skeleton<'a> {
    scheme: &'a Scheme,
    mode: RateMode,
    start: Vec<f64>,
    x0: &'a GridPath,
    set: &'a Halfspace,
}

impl Skeleton<'_> {
    fn path(&self, v: &ControlPath) -> Result<GridPath, DeviationError> {
        let mode = match self.mode {
            RateMode::Ldp => ControlledMode::Ldp,
            RateMode::Mdp => ControlledMode::MdpLinearized,
        };
        Ok(solve_controlled_deterministic(
            self.scheme,
            &self.start,
            v,
            self.x0,
            mode,
        )?)
    }

    fn terminal(&self, v: &ControlPath) -> Result<f64, DeviationError> {
        Ok(self.set.value(self.path(v)?.terminal()))
    }

    /// `J(v)` and its gradient in the `L²` metric, by one adjoint sweep.
    fn gradient(&self, v: &ControlPath) -> Result<(f64, Vec<f64>), DeviationError> {
        let path = self.path(v)?;
        let scheme = self.scheme;
        let grid = scheme.grid();
        let (n, dt) = (grid.n_steps(), grid.dt());
        let (d, m) = scheme.dims();
        let coeffs = scheme.coeffs();
        let w1 = scheme.w1();
        let wc = scheme.wc(match self.mode {
            RateMode::Ldp => ControlForm::Ldp,
            RateMode::Mdp => ControlForm::Mdp,
        });

        // drift sensitivity F_k, control sensitivity G_k = ∂(σ v_k)/∂x, and S_k
        let mut f = vec![0.0; n * d * d];
        let mut gk = vec![0.0; n * d * d];
        let mut s = vec![0.0; n * d * m];
        for k in 0..n {
            let t = grid.time(k);
            let anchor = self.x0.state(k);
            let law = EmpiricalMeasure::dirac(anchor)?;
            let fk = &mut f[k * d * d..(k + 1) * d * d];
            let sk = &mut s[k * d * m..(k + 1) * d * m];
            match self.mode {
                RateMode::Mdp => {
                    coeffs.drift_jacobian(t, anchor, &law, fk)?;
                    coeffs.diffusion(t, anchor, &law, sk);
                }
                RateMode::Ldp => {
                    let x = path.state(k);
                    coeffs.diffusion(t, x, &law, sk);
                    if coeffs.drift_jacobian(t, x, &law, fk).is_err() {
                        central_difference(d, d, x, fk, |y, out| coeffs.drift(t, y, &law, out));
                    }
                    let vk = v.value(k);
                    let mut sigma = vec![0.0; d * m];
                    central_difference(d, d, x, &mut gk[k * d * d..(k + 1) * d * d], |y, out| {
                        coeffs.diffusion(t, y, &law, &mut sigma);
                        for (r, o) in out.iter_mut().enumerate() {
                            *o = sigma[r * m..(r + 1) * m]
                                .iter()
                                .zip(vk)
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    });
                }
            }
        }

        // mu_i = dJ/dφ_i, swept backwards from mu_n = normal
        let mut mu = vec![0.0; (n + 1) * d];
        mu[n * d..].copy_from_slice(&self.set.normal);
        let mut grad = vec![0.0; n * m];
        for k in (0..n).rev() {
            let mut acc1 = vec![0.0; d];
            let mut accc = vec![0.0; d];
            for i in k + 1..=n {
                let (a1, ac) = (w1.get(i, k), wc.get(i, k));
                for c in 0..d {
                    acc1[c] += a1 * mu[i * d + c];
                    accc[c] += ac * mu[i * d + c];
                }
            }
            let fk = &f[k * d * d..(k + 1) * d * d];
            let gkk = &gk[k * d * d..(k + 1) * d * d];
            for c in 0..d {
                mu[k * d + c] = dt
                    * (0..d)
                        .map(|r| fk[r * d + c] * acc1[r] + gkk[r * d + c] * accc[r])
                        .sum::<f64>();
            }
            let sk = &s[k * d * m..(k + 1) * d * m];
            for j in 0..m {
                // L² gradient: the Euclidean partial divided by Δ
                grad[k * m + j] = (0..d).map(|r| sk[r * m + j] * accc[r]).sum();
            }
        }
        Ok((self.set.value(path.terminal()), grad))
    }
}

fn central_difference<F>(rows: usize, cols: usize, x: &[f64], out: &mut [f64], mut f: F)
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut y = x.to_vec();
    let (mut plus, mut minus) = (vec![0.0; rows], vec![0.0; rows]);
    for c in 0..cols {
        let h = 1e-6 * (1.0 + x[c].abs());
        y[c] = x[c] + h;
        f(&y, &mut plus);
        y[c] = x[c] - h;
        f(&y, &mut minus);
        y[c] = x[c];
        for r in 0..rows {
            out[r * cols + c] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
}

fn l2_dot(a: &[f64], b: &[f64], dt: f64) -> f64 {
    dt * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Least-energy control whose skeleton ends in a halfspace:
/// `min ½∫|v|² subject to normal · φ_T ≥ level` (LDP skeleton) or the same
/// on `ψ_T` (linearized skeleton).
///
/// Penalty continuation: each stage minimizes
/// `½∫|v|² + μ/2 · max(0, level - J(v))²` by descent with backtracking,
/// the direction preconditioned by the Gauss-Newton metric
/// `I + μ ∇J ∇Jᵀ` (inverted in closed form); `μ` grows by `penalty_growth`
/// per stage. A final Newton correction along `∇J` restores feasibility.
/// If `v = 0` already reaches the set the rate is 0.
pub fn minimize_rate_endpoint(
    scheme: &Scheme,
    mode: RateMode,
    xi: &[f64],
    x0: &GridPath,
    set: &Halfspace,
    init: &ControlPath,
    opts: &EndpointOptions,
) -> Result<RateSolution, DeviationError> {
    let (d, m) = scheme.dims();
    let grid = scheme.grid();
    if set.normal.len() != d || set.normal.iter().any(|a| !a.is_finite()) || !set.level.is_finite()
    {
        return Err(DeviationError::InvalidParameter(format!(
            "event normal must be a finite {d}-vector with a finite level"
        )));
    }
    if init.grid() != grid || init.dim() != m {
        return Err(DeviationError::GridMismatch(
            "initial control does not match the grid".into(),
        ));
    }
    if x0.grid() != grid || x0.dim() != d {
        return Err(DeviationError::GridMismatch(
            "limit path does not match the grid".into(),
        ));
    }
    if !(opts.step > 0.0 && opts.initial_penalty > 0.0 && opts.penalty_growth > 1.0) {
        return Err(DeviationError::InvalidParameter(
            "step and initial penalty must be positive and the growth factor above 1".into(),
        ));
    }
    let start = match mode {
        RateMode::Ldp => xi.to_vec(),
        RateMode::Mdp => vec![0.0; d],
    };
    let skel = Skeleton {
        scheme,
        mode,
        start,
        x0,
        set,
    };
    let dt = grid.dt();
    let tol = RESIDUAL_TOL * (1.0 + set.level.abs());

    let zero = ControlPath::zero(grid, m);
    if skel.terminal(&zero)? >= set.level {
        return Ok(RateSolution {
            v_star: zero,
            rate: 0.0,
            residual: 0.0,
            attained: true,
            regularization_used: 0.0,
            iterations: 0,
            diagnostic: None,
        });
    }

    let objective = |v: &ControlPath, mu: f64| -> Result<f64, DeviationError> {
        let gap = (set.level - skel.terminal(v)?).max(0.0);
        Ok(v.energy() + 0.5 * mu * gap * gap)
    };

    let mut v = init.clone();
    let mut iterations = 0;
    let mut mu = opts.initial_penalty;
    for _ in 0..opts.stages {
        for _ in 0..opts.max_iter {
            let (j, gj) = skel.gradient(&v)?;
            let gap = (set.level - j).max(0.0);
            let grad_f: Vec<f64> = v
                .values()
                .iter()
                .zip(&gj)
                .map(|(x, g)| x - mu * gap * g)
                .collect();
            let dir: Vec<f64> = if gap > 0.0 {
                let coef = mu * l2_dot(&gj, &grad_f, dt) / (1.0 + mu * l2_dot(&gj, &gj, dt));
                grad_f
                    .iter()
                    .zip(&gj)
                    .map(|(a, g)| -(a - coef * g))
                    .collect()
            } else {
                grad_f.iter().map(|a| -a).collect()
            };
            let dir_norm = l2_dot(&dir, &dir, dt).sqrt();
            let v_norm = l2_dot(v.values(), v.values(), dt).sqrt();
            if dir_norm <= 1e-13 * (1.0 + v_norm) {
                break;
            }
            iterations += 1;
            let f0 = v.energy() + 0.5 * mu * gap * gap;
            let slope = l2_dot(&grad_f, &dir, dt);
            let mut alpha = opts.step;
            let mut accepted = None;
            while alpha >= 1e-14 {
                let trial: Vec<f64> = v
                    .values()
                    .iter()
                    .zip(&dir)
                    .map(|(x, p)| x + alpha * p)
                    .collect();
                let trial = ControlPath::new(grid, m, trial)?;
                if objective(&trial, mu)? <= f0 + 1e-4 * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some(next) => v = next,
                None => break,
            }
        }
        mu *= opts.penalty_growth;
    }

    // feasibility correction along the constraint gradient
    let mut j = skel.terminal(&v)?;
    for _ in 0..20 {
        if j >= set.level - 1e-14 * (1.0 + set.level.abs()) {
            break;
        }
        let (jv, gj) = skel.gradient(&v)?;
        let norm2 = l2_dot(&gj, &gj, dt);
        if !(norm2 > 0.0) {
            break;
        }
        let s = (set.level - jv) / norm2;
        let next: Vec<f64> = v.values().iter().zip(&gj).map(|(x, g)| x + s * g).collect();
        v = ControlPath::new(grid, m, next)?;
        j = skel.terminal(&v)?;
        iterations += 1;
    }
    let residual = (set.level - j).max(0.0);
    let attained = residual <= tol;
    let diagnostic = (!attained).then(|| {
        format!(
            "terminal value {j:.6e} stays below the level {:.6e} within the iteration budget",
            set.level
        )
    });
    Ok(RateSolution {
        rate: v.energy(),
        v_star: v,
        residual,
        attained,
        regularization_used: 0.0,
        iterations,
        diagnostic,
    })
}
