use rayon::prelude::*;

use crate::harness::rng::{Purpose, RngStream};
use crate::kernels::{Grid, GridKernel};
use crate::measures::EmpiricalMeasure;

use super::{ControlForm, ControlPath, GridPath, PathEnsemble, Scheme, VolterraError};

/// States beyond this magnitude abort the run.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// Default limit for the memory estimate `N · n_steps · d · 8 · 2` bytes.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

/// Initial condition `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    Fixed(Vec<f64>),
    /// `ξ = mean + std · N(0, I)`, i.i.d. per particle.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
}

impl Initializer {
    pub fn dim(&self) -> usize {
        match self {
            Self::Fixed(x) => x.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            Self::Fixed(_) => true,
            Self::Gaussian { std, .. } => *std == 0.0,
        }
    }

    fn fill(&self, seed: u64, stream_ids: &[u64]) -> Vec<f64> {
        match self {
            Self::Fixed(x) => x
                .iter()
                .copied()
                .cycle()
                .take(x.len() * stream_ids.len())
                .collect(),
            Self::Gaussian { mean, std } => {
                let rng = RngStream::new(seed, Purpose::InitialState);
                stream_ids
                    .iter()
                    .flat_map(|&id| {
                        mean.iter()
                            .enumerate()
                            .map(move |(c, m)| m + std * rng.normal(id, 0, c as u64))
                    })
                    .collect()
            }
        }
    }
}

/// Law fed to the coefficients of a controlled run.
#[derive(Debug, Clone, PartialEq)]
pub enum LawMode {
    /// Empirical law of the controlled ensemble itself.
    SelfConsistent,
    /// Empirical law of the uncontrolled ensemble driven by the same
    /// increments, `L(X^ε)`.
    Uncontrolled,
    /// `δ_{φ_t}` for a given path.
    Frozen(GridPath),
}

/// Where the noise enters a controlled run.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseForm {
    /// State `X^{ε,v}` with noise `√ε`.
    Ldp,
    /// State `Y^{ε,v} = (X - X⁰)/(√ε h)` with noise `1/h`.
    Mdp { h_eps: f64, x0: GridPath },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationOptions {
    /// Worker threads; `None` uses the ambient pool.
    pub workers: Option<usize>,
    /// Bytes; `None` means [`DEFAULT_MEMORY_BUDGET`].
    pub memory_budget: Option<u64>,
    /// Driver stream of each particle; defaults to `0..N`.
    pub stream_ids: Option<Vec<u64>>,
}

impl SimulationOptions {
    pub fn with_workers(workers: usize) -> Self {
        Self {
            workers: Some(workers),
            ..Self::default()
        }
    }
}

/// Per-step coefficient evaluation of a scheme.
pub(crate) trait Dynamics: Sync {
    /// Law at step `step` given all particle states there (`N × d`).
    fn law(&self, step: usize, states: &[f64]) -> Result<EmpiricalMeasure, VolterraError>;
    /// Drift (`d`) and diffusion (`d × m`) at `(t_step, x)`.
    fn terms(
        &self,
        step: usize,
        t: f64,
        x: &[f64],
        law: &EmpiricalMeasure,
        drift: &mut [f64],
        sigma: &mut [f64],
    );
}

pub(crate) struct EngineSpec<'a> {
    pub grid: Grid,
    pub d: usize,
    pub m: usize,
    pub w1: &'a GridKernel,
    pub w2: &'a GridKernel,
    pub control: Option<(&'a GridKernel, &'a ControlPath)>,
    pub noise_scale: f64,
    /// `N × d` initial states.
    pub init: Vec<f64>,
    pub seed: u64,
    pub stream_ids: Vec<u64>,
    pub workers: Option<usize>,
}

pub(crate) fn with_pool<T, F>(workers: Option<usize>, f: F) -> Result<T, VolterraError>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match workers {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| VolterraError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

pub(crate) fn check_budget(
    n_particles: usize,
    grid: Grid,
    d: usize,
    budget: Option<u64>,
) -> Result<(), VolterraError> {
    let required = (n_particles as u64)
        .saturating_mul(grid.n_steps() as u64)
        .saturating_mul(d as u64)
        .saturating_mul(16);
    let limit = budget.unwrap_or(DEFAULT_MEMORY_BUDGET);
    if required > limit {
        return Err(VolterraError::Budget { required, limit });
    }
    Ok(())
}

/// Runs the left-point scheme
/// `X_{i+1} = ξ + Δ Σ_{k<=i} w1[i+1][k] b_k + Δ Σ_k wc[i+1][k] σ_k v_k + s Σ_k w2[i+1][k] σ_k ΔW_k`
/// with a barrier between steps. Returns the particle-major states.
pub(crate) fn run_engine(
    spec: &EngineSpec<'_>,
    dynamics: &dyn Dynamics,
) -> Result<Vec<f64>, VolterraError> {
    with_pool(spec.workers, || run_steps(spec, dynamics))?
}

fn run_steps(spec: &EngineSpec<'_>, dynamics: &dyn Dynamics) -> Result<Vec<f64>, VolterraError> {
    let (d, m) = (spec.d, spec.m);
    let n = spec.grid.n_steps();
    let n_particles = spec.stream_ids.len();
    let dt = spec.grid.dt();
    let sqrt_dt = dt.sqrt();
    let noisy = spec.noise_scale != 0.0;
    let controlled = spec.control.is_some();
    let stride = (n + 1) * d;
    // per particle: drift cache, then noise cache, then control cache
    let blocks = 1 + usize::from(noisy) + usize::from(controlled);
    let cache_stride = blocks * n * d;
    let noise_off = n * d;
    let ctrl_off = if noisy { 2 * n * d } else { n * d };

    let mut states = vec![0.0; n_particles * stride];
    for (chunk, x0) in states
        .chunks_exact_mut(stride)
        .zip(spec.init.chunks_exact(d))
    {
        chunk[..d].copy_from_slice(x0);
    }
    let mut cache = vec![0.0; n_particles * cache_stride];
    let rng = RngStream::new(spec.seed, Purpose::Driver);
    let mut gathered = vec![0.0; n_particles * d];

    for i in 0..n {
        for (p, g) in gathered.chunks_exact_mut(d).enumerate() {
            g.copy_from_slice(&states[p * stride + i * d..p * stride + (i + 1) * d]);
        }
        let law = dynamics.law(i, &gathered)?;
        let t = spec.grid.time(i);
        let w1 = spec.w1.row(i + 1);
        let w2 = spec.w2.row(i + 1);
        let ctrl = spec.control.map(|(wc, v)| (wc.row(i + 1), v.value(i)));
        let overflow: Option<(usize, f64)> = states
            .par_chunks_mut(stride)
            .zip(cache.par_chunks_mut(cache_stride))
            .enumerate()
            .map(|(p, (xs, cs))| {
                let mut b = vec![0.0; d];
                let mut sigma = vec![0.0; d * m];
                let x = &xs[i * d..(i + 1) * d];
                dynamics.terms(i, t, x, &law, &mut b, &mut sigma);
                cs[i * d..(i + 1) * d].copy_from_slice(&b);
                if noisy {
                    let id = spec.stream_ids[p];
                    let dw: Vec<f64> = (0..m)
                        .map(|c| sqrt_dt * rng.normal(id, i as u64, c as u64))
                        .collect();
                    let slot = &mut cs[noise_off + i * d..noise_off + (i + 1) * d];
                    for (r, s) in slot.iter_mut().enumerate() {
                        *s = sigma[r * m..(r + 1) * m]
                            .iter()
                            .zip(&dw)
                            .map(|(a, w)| a * w)
                            .sum();
                    }
                }
                if let Some((_, v)) = ctrl {
                    let slot = &mut cs[ctrl_off + i * d..ctrl_off + (i + 1) * d];
                    for (r, s) in slot.iter_mut().enumerate() {
                        *s = sigma[r * m..(r + 1) * m]
                            .iter()
                            .zip(v)
                            .map(|(a, w)| a * w)
                            .sum();
                    }
                }
                let mut worst = 0.0f64;
                for c in 0..d {
                    let mut acc = dt * dot_strided(w1, &cs[..], c, d);
                    if let Some((wc, _)) = ctrl {
                        acc += dt * dot_strided(wc, &cs[ctrl_off..], c, d);
                    }
                    if noisy {
                        acc += spec.noise_scale * dot_strided(w2, &cs[noise_off..], c, d);
                    }
                    let x_next = xs[c] + acc;
                    xs[(i + 1) * d + c] = x_next;
                    if !(x_next.abs() <= worst) {
                        worst = if x_next.is_nan() {
                            f64::INFINITY
                        } else {
                            x_next.abs()
                        };
                    }
                }
                (p, worst)
            })
            .filter(|(_, w)| *w > OVERFLOW_GUARD)
            .min_by_key(|(p, _)| *p);
        if let Some((particle, value)) = overflow {
            return Err(VolterraError::Blowup {
                step: i + 1,
                particle,
                value,
            });
        }
    }
    Ok(states)
}

/// `Σ_k w[k] cache[k d + c]` over `k < w.len()`.
#[inline]
fn dot_strided(w: &[f64], cache: &[f64], c: usize, d: usize) -> f64 {
    if d == 1 {
        return w.iter().zip(cache).map(|(a, b)| a * b).sum();
    }
    w.iter()
        .enumerate()
        .map(|(k, a)| a * cache[k * d + c])
        .sum()
}

struct McKeanVlasov<'a> {
    scheme: &'a Scheme,
    companion: Option<&'a PathEnsemble>,
    frozen: Option<&'a GridPath>,
}

impl Dynamics for McKeanVlasov<'_> {
    fn law(&self, step: usize, states: &[f64]) -> Result<EmpiricalMeasure, VolterraError> {
        let d = self.scheme.dims().0;
        if let Some(path) = self.frozen {
            return Ok(EmpiricalMeasure::dirac(path.state(step))?);
        }
        if let Some(ens) = self.companion {
            return ens.measure_at(step);
        }
        Ok(EmpiricalMeasure::uniform(d, states.to_vec())?)
    }

    fn terms(
        &self,
        _step: usize,
        t: f64,
        x: &[f64],
        law: &EmpiricalMeasure,
        drift: &mut [f64],
        sigma: &mut [f64],
    ) {
        let c = self.scheme.coeffs();
        c.drift(t, x, law, drift);
        c.diffusion(t, x, law, sigma);
    }
}

pub(crate) struct Moderate<'a> {
    scheme: &'a Scheme,
    x0: &'a GridPath,
    /// `b(t_i, X⁰_i, δ_{X⁰_i})`.
    base_drift: Vec<f64>,
    kappa: f64,
    companion: Option<&'a PathEnsemble>,
    frozen: Option<&'a GridPath>,
}

impl<'a> Moderate<'a> {
    /// Self-consistent law, `Y = (X - X⁰)/κ`.
    pub(crate) fn new(
        scheme: &'a Scheme,
        x0: &'a GridPath,
        kappa: f64,
    ) -> Result<Self, VolterraError> {
        let grid = scheme.grid();
        let d = scheme.dims().0;
        let mut base_drift = vec![0.0; (grid.n_steps() + 1) * d];
        for (i, out) in base_drift.chunks_exact_mut(d).enumerate() {
            let x = x0.state(i);
            scheme
                .coeffs()
                .drift(grid.time(i), x, &EmpiricalMeasure::dirac(x)?, out);
        }
        Ok(Self {
            scheme,
            x0,
            base_drift,
            kappa,
            companion: None,
            frozen: None,
        })
    }
}

impl Dynamics for Moderate<'_> {
    fn law(&self, step: usize, states: &[f64]) -> Result<EmpiricalMeasure, VolterraError> {
        let d = self.scheme.dims().0;
        if let Some(path) = self.frozen {
            return Ok(EmpiricalMeasure::dirac(path.state(step))?);
        }
        if let Some(ens) = self.companion {
            return ens.measure_at(step);
        }
        let x0 = self.x0.state(step);
        let pts: Vec<f64> = states
            .chunks_exact(d)
            .flat_map(|y| y.iter().zip(x0).map(|(yv, xv)| xv + self.kappa * yv))
            .collect();
        Ok(EmpiricalMeasure::uniform(d, pts)?)
    }

    fn terms(
        &self,
        step: usize,
        t: f64,
        y: &[f64],
        law: &EmpiricalMeasure,
        drift: &mut [f64],
        sigma: &mut [f64],
    ) {
        let c = self.scheme.coeffs();
        let d = y.len();
        let x0 = self.x0.state(step);
        let x: Vec<f64> = x0.iter().zip(y).map(|(a, b)| a + self.kappa * b).collect();
        if self.kappa == 0.0 {
            // ε = 0: the difference quotient is the linearization ∇b · y.
            let dirac = EmpiricalMeasure::dirac(x0).expect("finite limit path");
            let mut jac = vec![0.0; d * d];
            if c.drift_jacobian(t, x0, &dirac, &mut jac).is_ok() {
                for (r, o) in drift.iter_mut().enumerate() {
                    *o = (0..d).map(|k| jac[r * d + k] * y[k]).sum();
                }
            } else {
                drift.iter_mut().for_each(|o| *o = f64::NAN);
            }
        } else {
            c.drift(t, &x, law, drift);
            let base = &self.base_drift[step * d..(step + 1) * d];
            for (o, b0) in drift.iter_mut().zip(base) {
                *o = (*o - b0) / self.kappa;
            }
        }
        c.diffusion(t, &x, law, sigma);
    }
}

fn stream_ids(opts: &SimulationOptions, n_particles: usize) -> Result<Vec<u64>, VolterraError> {
    match &opts.stream_ids {
        Some(ids) if ids.len() != n_particles => Err(VolterraError::InvalidParameter(format!(
            "{} stream ids for {n_particles} particles",
            ids.len()
        ))),
        Some(ids) => Ok(ids.clone()),
        None => Ok((0..n_particles as u64).collect()),
    }
}

fn validate(
    scheme: &Scheme,
    init: &Initializer,
    eps: f64,
    n_particles: usize,
) -> Result<(), VolterraError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(VolterraError::InvalidParameter(format!(
            "eps = {eps} must lie in [0, 1]"
        )));
    }
    if n_particles == 0 {
        return Err(VolterraError::InvalidParameter(
            "need at least one particle".into(),
        ));
    }
    let d = scheme.dims().0;
    if init.dim() != d {
        return Err(VolterraError::InvalidParameter(format!(
            "initial condition has dimension {}, model has d = {d}",
            init.dim()
        )));
    }
    Ok(())
}

/// Interacting particle system for
/// `X_t = ξ + ∫ K1 b(s, X_s, L(X_s)) ds + √ε ∫ K2 σ(s, X_s, L(X_s)) dW_s`,
/// with the law replaced by the empirical measure of the particles at each
/// step. Output depends only on `(seed, stream ids, N, grid, model)`; the
/// same increments are used for every `ε`.
pub fn simulate_particles(
    scheme: &Scheme,
    init: &Initializer,
    eps: f64,
    n_particles: usize,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<PathEnsemble, VolterraError> {
    validate(scheme, init, eps, n_particles)?;
    let (d, m) = scheme.dims();
    check_budget(n_particles, scheme.grid(), d, opts.memory_budget)?;
    let ids = stream_ids(opts, n_particles)?;
    let spec = EngineSpec {
        grid: scheme.grid(),
        d,
        m,
        w1: scheme.w1(),
        w2: scheme.w2(),
        control: None,
        noise_scale: eps.sqrt(),
        init: init.fill(seed, &ids),
        seed,
        stream_ids: ids,
        workers: opts.workers,
    };
    let dynamics = McKeanVlasov {
        scheme,
        companion: None,
        frozen: None,
    };
    let states = run_engine(&spec, &dynamics)?;
    Ok(PathEnsemble {
        grid: scheme.grid(),
        dim: d,
        noise_dim: m,
        n_particles,
        states,
        seed,
        stream_ids: spec.stream_ids,
    })
}

/// Controlled particle system.
///
/// * [`NoiseForm::Ldp`]: `X = ξ + ∫K1 b + ∫Kc σ v + √ε ∫K2 σ dW`.
/// * [`NoiseForm::Mdp`]: `Y = ∫K1 [b(X⁰ + κY) - b(X⁰, δ_{X⁰})]/κ + ∫Kc σ v + h⁻¹ ∫K2 σ dW`
///   with `κ = √ε h` and coefficients evaluated at `X⁰ + κY`; `Y_0 = 0`.
///
/// `Kc` defaults to `K1` (LDP) or `K2` (MDP). With `v ≡ 0` in LDP form and
/// the self-consistent law, the output equals [`simulate_particles`] bit for
/// bit.
#[allow(clippy::too_many_arguments)]
pub fn simulate_controlled(
    scheme: &Scheme,
    init: &Initializer,
    eps: f64,
    control: &ControlPath,
    form: &NoiseForm,
    law: &LawMode,
    n_particles: usize,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<PathEnsemble, VolterraError> {
    validate(scheme, init, eps, n_particles)?;
    let (d, m) = scheme.dims();
    let grid = scheme.grid();
    if control.grid() != grid || control.dim() != m {
        return Err(VolterraError::GridMismatch(format!(
            "control must have dimension m = {m} on the scheme grid"
        )));
    }
    if let LawMode::Frozen(path) = law {
        if path.grid() != grid || path.dim() != d {
            return Err(VolterraError::GridMismatch(
                "frozen law path does not match the grid".into(),
            ));
        }
    }
    check_budget(n_particles, grid, d, opts.memory_budget)?;
    let ids = stream_ids(opts, n_particles)?;
    let companion = match law {
        LawMode::Uncontrolled => {
            let start = match form {
                NoiseForm::Ldp => init.clone(),
                NoiseForm::Mdp { x0, .. } => Initializer::Fixed(x0.state(0).to_vec()),
            };
            Some(simulate_particles(
                scheme,
                &start,
                eps,
                n_particles,
                seed,
                opts,
            )?)
        }
        _ => None,
    };
    let frozen = match law {
        LawMode::Frozen(path) => Some(path),
        _ => None,
    };
    let (control_form, noise_scale, init_states) = match form {
        NoiseForm::Ldp => (ControlForm::Ldp, eps.sqrt(), init.fill(seed, &ids)),
        NoiseForm::Mdp { h_eps, x0 } => {
            if !(*h_eps > 0.0) {
                return Err(VolterraError::InvalidParameter(format!(
                    "h(eps) = {h_eps} must be positive"
                )));
            }
            if x0.grid() != grid || x0.dim() != d {
                return Err(VolterraError::GridMismatch(
                    "limit path does not match the grid".into(),
                ));
            }
            (ControlForm::Mdp, 1.0 / h_eps, vec![0.0; n_particles * d])
        }
    };
    let spec = EngineSpec {
        grid,
        d,
        m,
        w1: scheme.w1(),
        w2: scheme.w2(),
        control: Some((scheme.wc(control_form), control)),
        noise_scale,
        init: init_states,
        seed,
        stream_ids: ids,
        workers: opts.workers,
    };
    let states = match form {
        NoiseForm::Ldp => {
            let dynamics = McKeanVlasov {
                scheme,
                companion: companion.as_ref(),
                frozen,
            };
            run_engine(&spec, &dynamics)?
        }
        NoiseForm::Mdp { h_eps, x0 } => {
            let dynamics = Moderate {
                companion: companion.as_ref(),
                frozen,
                ..Moderate::new(scheme, x0, eps.sqrt() * h_eps)?
            };
            run_engine(&spec, &dynamics)?
        }
    };
    Ok(PathEnsemble {
        grid,
        dim: d,
        noise_dim: m,
        n_particles,
        states,
        seed,
        stream_ids: spec.stream_ids,
    })
}
