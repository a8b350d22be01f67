use std::fmt::Write;
use std::sync::Arc;

use crate::asymptotics::{clt_gap, clt_pair, scaling_regression, sup_deviation_moment};
use crate::coefficients::{Coefficients, LinearMeanField};
use crate::deviations::{
    ldp_rate, mdp_rate, minimize_rate_endpoint, tail_probability_probe, EndpointOptions, Halfspace,
    LdpSolver, RateMode, RateProblem, RateSolution, TailMode,
};
use crate::kernels::{
    class_k_check, regularity_probe, resolvent, resolvent_identity_defect, Grid, GridKernel,
    ResolventMethod,
};
use crate::volterra::{
    simulate_particles, solve_controlled_deterministic, solve_deterministic_limit, ControlPath,
    ControlledMode, GridPath, Initializer, LimitMethod, Scheme, SimulationOptions, VolterraModel,
};

use super::config::{EventMode, ExperimentConfig, ExperimentKind, ModelSpec, TargetSpec};
use super::models::ModelRegistry;
use super::HarnessError;

/// In-memory outputs of one experiment, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    fn push(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_str())
    }
}

/// Flat `key=value` lines.
#[derive(Default)]
struct Summary(String);

impl Summary {
    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.0, "{key}={value}").unwrap();
    }

    fn num(&mut self, key: &str, value: f64) {
        writeln!(self.0, "{key}={value:.16e}").unwrap();
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn eps_tag(eps: f64) -> String {
    format!("{eps:e}")
}

fn runtime<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

pub fn coefficients(
    cfg: &ExperimentConfig,
    registry: &ModelRegistry,
) -> Result<Arc<dyn Coefficients>, HarnessError> {
    match &cfg.model {
        ModelSpec::Linear {
            d,
            m,
            a,
            b,
            sigma0,
            sigma1,
        } => {
            let model =
                LinearMeanField::new(*d, *m, a.clone(), b.clone(), sigma0.clone(), sigma1.clone())
                    .map_err(|e| HarnessError::Validation(vec![format!("model: {e}")]))?;
            Ok(Arc::new(model))
        }
        ModelSpec::Custom { key, .. } => registry.get(key).ok_or_else(|| {
            HarnessError::Validation(vec![format!("model.key '{key}' is not registered")])
        }),
    }
}

pub fn build_scheme(
    cfg: &ExperimentConfig,
    registry: &ModelRegistry,
) -> Result<Scheme, HarnessError> {
    let kernel = |name: &str, spec: &super::config::KernelSpec| {
        spec.build()
            .map_err(|e| HarnessError::Validation(vec![format!("kernels.{name}: {e}")]))
    };
    let mut model = VolterraModel::new(
        kernel("k1", &cfg.kernels.k1)?,
        kernel("k2", &cfg.kernels.k2)?,
        coefficients(cfg, registry)?,
    );
    if let Some(kc) = &cfg.kernels.kc {
        model = model.with_control_kernel(kernel("kc", kc)?);
    }
    let grid = Grid::new(cfg.grid.horizon, cfg.grid.n_steps)
        .map_err(|e| HarnessError::Validation(vec![format!("grid: {e}")]))?;
    Scheme::new(&model, grid).map_err(runtime)
}

fn initializer(cfg: &ExperimentConfig) -> Initializer {
    if cfg.run.xi_std == 0.0 {
        Initializer::Fixed(cfg.run.xi.clone())
    } else {
        Initializer::Gaussian {
            mean: cfg.run.xi.clone(),
            std: cfg.run.xi_std,
        }
    }
}

fn limit_method(cfg: &ExperimentConfig) -> LimitMethod {
    match cfg.optimizer.limit.as_str() {
        "picard" => LimitMethod::Picard {
            max_iter: cfg.optimizer.picard_max_iter,
            tol: cfg.optimizer.picard_tol,
        },
        _ => LimitMethod::Stepping,
    }
}

fn limit_path(cfg: &ExperimentConfig, scheme: &Scheme) -> Result<GridPath, HarnessError> {
    Ok(
        solve_deterministic_limit(scheme, &cfg.run.xi, LimitMethod::Stepping)
            .map_err(runtime)?
            .path,
    )
}

/// Bytes the particle states of one ensemble would need.
pub fn memory_estimate(cfg: &ExperimentConfig) -> u64 {
    let (d, _) = cfg.model.dims();
    (cfg.run.n_particles as u64)
        .saturating_mul(cfg.grid.n_steps as u64)
        .saturating_mul(d as u64)
        .saturating_mul(16)
}

/// Runs one experiment and returns its artifacts without touching disk.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    registry: &ModelRegistry,
    workers: Option<usize>,
) -> Result<Artifacts, HarnessError> {
    if cfg.kind.simulates() {
        let required = memory_estimate(cfg);
        if required > cfg.run.memory_budget {
            return Err(HarnessError::Budget {
                required,
                limit: cfg.run.memory_budget,
            });
        }
    }
    let opts = SimulationOptions {
        workers,
        memory_budget: Some(cfg.run.memory_budget),
        stream_ids: None,
    };
    let scheme = build_scheme(cfg, registry)?;
    match cfg.kind {
        ExperimentKind::Simulate => simulate(cfg, &scheme, &opts),
        ExperimentKind::Limit => limit(cfg, &scheme),
        ExperimentKind::Clt => clt(cfg, &scheme, &opts),
        ExperimentKind::LdpRate => rate(cfg, &scheme, RateMode::Ldp),
        ExperimentKind::MdpRate => rate(cfg, &scheme, RateMode::Mdp),
        ExperimentKind::RateMin => rate_min(cfg, &scheme),
        ExperimentKind::TailProbe => tail(cfg, &scheme, &opts),
        ExperimentKind::Resolvent => resolvent_table(cfg, &scheme),
        ExperimentKind::KernelProbe => kernel_probe(cfg),
    }
}

fn regression_lines(s: &mut Summary, prefix: &str, points: &[(f64, f64)], expected: f64) {
    match scaling_regression(points, expected) {
        Ok(fit) => {
            s.num(&format!("{prefix}slope"), fit.slope);
            s.num(&format!("{prefix}intercept"), fit.intercept);
            s.num(&format!("{prefix}r2"), fit.r2);
            s.num(&format!("{prefix}expected_slope"), fit.expected_slope);
        }
        Err(e) => s.put(&format!("{prefix}regression"), format!("skipped ({e})")),
    }
}

fn simulate(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    opts: &SimulationOptions,
) -> Result<Artifacts, HarnessError> {
    let mut out = Artifacts::default();
    let init = initializer(cfg);
    let x0 = match &init {
        Initializer::Fixed(_) => Some(limit_path(cfg, scheme)?),
        _ => None,
    };
    let mut deviation = String::from("eps,e_sup,stderr\n");
    let mut points = Vec::new();
    for &eps in &cfg.run.eps {
        let ens = simulate_particles(scheme, &init, eps, cfg.run.n_particles, cfg.run.seed, opts)
            .map_err(runtime)?;
        out.push(
            format!("summary_eps{}.csv", eps_tag(eps)),
            ens.summary_csv(&cfg.run.p),
        );
        if cfg.run.write_ensemble {
            out.push(format!("ensemble_eps{}.csv", eps_tag(eps)), ens.to_csv());
        }
        if let Some(x0) = &x0 {
            let g = sup_deviation_moment(&ens, x0, 1.0).map_err(runtime)?;
            writeln!(
                deviation,
                "{},{},{}",
                num(eps),
                num(g.moment),
                num(g.stderr)
            )
            .unwrap();
            points.push((eps, g.moment));
        }
    }
    let mut s = Summary::default();
    s.put("kind", "simulate");
    s.put("n_particles", cfg.run.n_particles);
    s.put("eps_count", cfg.run.eps.len());
    if let Some(x0) = &x0 {
        out.push("limit.csv", x0.to_csv());
        out.push("deviation.csv", deviation);
        regression_lines(&mut s, "", &points, 0.5);
    } else {
        s.put(
            "regression",
            "skipped (random initial condition has no deterministic limit)",
        );
    }
    out.push("summary.txt", s.0);
    Ok(out)
}

fn limit(cfg: &ExperimentConfig, scheme: &Scheme) -> Result<Artifacts, HarnessError> {
    let sol = solve_deterministic_limit(scheme, &cfg.run.xi, limit_method(cfg)).map_err(runtime)?;
    let mut s = Summary::default();
    s.put("kind", "limit");
    s.put("method", &cfg.optimizer.limit);
    s.put("iterations", sol.iterations);
    s.num("residual", sol.residual);
    for (c, v) in sol.path.terminal().iter().enumerate() {
        s.num(&format!("terminal_x{}", c + 1), *v);
    }
    let mut out = Artifacts::default();
    out.push("limit.csv", sol.path.to_csv());
    out.push("summary.txt", s.0);
    Ok(out)
}

fn clt(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    opts: &SimulationOptions,
) -> Result<Artifacts, HarnessError> {
    let init = initializer(cfg);
    let p_list = &cfg.run.p;
    let mut csv = String::from("eps");
    for p in p_list {
        write!(csv, ",gap_p{p}").unwrap();
    }
    for p in p_list {
        write!(csv, ",stderr_p{p}").unwrap();
    }
    csv.push('\n');
    let mut points = vec![Vec::new(); p_list.len()];
    for &eps in &cfg.run.eps {
        let pair = clt_pair(scheme, &init, eps, cfg.run.n_particles, cfg.run.seed, opts)
            .map_err(runtime)?;
        let gaps = p_list
            .iter()
            .map(|&p| clt_gap(&pair, p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        csv.push_str(&num(eps));
        for g in &gaps {
            write!(csv, ",{}", num(g.moment)).unwrap();
        }
        for g in &gaps {
            write!(csv, ",{}", num(g.stderr)).unwrap();
        }
        csv.push('\n');
        for (k, g) in gaps.iter().enumerate() {
            points[k].push((eps, g.moment));
        }
    }
    let mut s = Summary::default();
    s.put("kind", "clt");
    s.put("n_particles", cfg.run.n_particles);
    for (k, p) in p_list.iter().enumerate() {
        regression_lines(&mut s, &format!("p{p}_"), &points[k], p / 2.0);
    }
    let mut out = Artifacts::default();
    out.push("clt.csv", csv);
    out.push("summary.txt", s.0);
    Ok(out)
}

fn read_target_csv(path: &std::path::Path, grid: Grid, d: usize) -> Result<GridPath, HarnessError> {
    let bad = |msg: String| {
        HarnessError::Validation(vec![format!("target.path {}: {msg}", path.display())])
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut values = Vec::with_capacity((grid.n_steps() + 1) * d);
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(bad(format!(
                "line {} has {} columns, expected {}",
                lineno + 1,
                cells.len(),
                d + 1
            )));
        }
        let parsed: Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        let parsed = parsed.map_err(|_| bad(format!("line {} is not numeric", lineno + 1)))?;
        if rows > grid.n_steps() || (parsed[0] - grid.time(rows)).abs() > 1e-9 * grid.horizon() {
            return Err(bad(format!(
                "line {} does not sit on grid node {rows}",
                lineno + 1
            )));
        }
        values.extend_from_slice(&parsed[1..]);
        rows += 1;
    }
    if rows != grid.n_steps() + 1 {
        return Err(bad(format!("{rows} rows, expected {}", grid.n_steps() + 1)));
    }
    GridPath::new(grid, d, values).map_err(runtime)
}

fn target_path(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    mode: RateMode,
    x0: &GridPath,
) -> Result<GridPath, HarnessError> {
    let grid = scheme.grid();
    let (d, m) = scheme.dims();
    match &cfg.target {
        TargetSpec::Line { slope } => {
            let start = match mode {
                RateMode::Ldp => cfg.run.xi.clone(),
                RateMode::Mdp => vec![0.0; d],
            };
            Ok(GridPath::from_fn(grid, d, |t, out| {
                for c in 0..d {
                    out[c] = start[c] + slope[c] * t;
                }
            }))
        }
        TargetSpec::Pushed { control } => {
            let v = ControlPath::constant(grid, control);
            debug_assert_eq!(v.dim(), m);
            let cm = match mode {
                RateMode::Ldp => ControlledMode::Ldp,
                RateMode::Mdp => ControlledMode::MdpLinearized,
            };
            solve_controlled_deterministic(scheme, &cfg.run.xi, &v, x0, cm).map_err(runtime)
        }
        TargetSpec::Csv { path } => read_target_csv(path, grid, d),
    }
}

fn solution_summary(s: &mut Summary, sol: &RateSolution) {
    s.num("rate", sol.rate);
    s.num("residual", sol.residual);
    s.put("attained", sol.attained);
    s.num("regularization_used", sol.regularization_used);
    s.put("iterations", sol.iterations);
    if let Some(d) = &sol.diagnostic {
        s.put("diagnostic", d.replace('\n', " "));
    }
}

fn rate(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    mode: RateMode,
) -> Result<Artifacts, HarnessError> {
    let x0 = limit_path(cfg, scheme)?;
    let target = target_path(cfg, scheme, mode, &x0)?;
    let problem = RateProblem::new(mode, scheme.clone(), x0, target.clone())
        .with_regularization(cfg.optimizer.regularization);
    let sol = match mode {
        RateMode::Mdp => mdp_rate(&problem),
        RateMode::Ldp => {
            let solver = match cfg.optimizer.solver.as_str() {
                "descent" => LdpSolver::Descent {
                    max_iter: cfg.optimizer.descent_max_iter,
                    step: None,
                    tol: cfg.optimizer.descent_tol,
                },
                _ => LdpSolver::Triangular,
            };
            ldp_rate(&problem, solver)
        }
    }
    .map_err(runtime)?;
    let mut s = Summary::default();
    s.put("kind", cfg.kind);
    solution_summary(&mut s, &sol);
    let mut out = Artifacts::default();
    out.push("control.csv", sol.v_star.to_csv());
    out.push("target.csv", target.to_csv());
    out.push("rate.txt", s.0);
    Ok(out)
}

fn endpoint_options(cfg: &ExperimentConfig) -> EndpointOptions {
    let o = &cfg.optimizer;
    EndpointOptions {
        max_iter: o.max_iter,
        step: o.step,
        stages: o.stages,
        initial_penalty: o.initial_penalty,
        penalty_growth: o.penalty_growth,
    }
}

fn event_mode(cfg: &ExperimentConfig) -> RateMode {
    match cfg.event.mode {
        EventMode::Ldp => RateMode::Ldp,
        EventMode::Mdp => RateMode::Mdp,
    }
}

fn minimize(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    x0: &GridPath,
) -> Result<RateSolution, HarnessError> {
    let (_, m) = scheme.dims();
    let set = Halfspace::new(cfg.event.normal.clone(), cfg.event.level);
    let init = ControlPath::zero(scheme.grid(), m);
    minimize_rate_endpoint(
        scheme,
        event_mode(cfg),
        &cfg.run.xi,
        x0,
        &set,
        &init,
        &endpoint_options(cfg),
    )
    .map_err(runtime)
}

fn rate_min(cfg: &ExperimentConfig, scheme: &Scheme) -> Result<Artifacts, HarnessError> {
    let x0 = limit_path(cfg, scheme)?;
    let sol = minimize(cfg, scheme, &x0)?;
    let cm = match event_mode(cfg) {
        RateMode::Ldp => ControlledMode::Ldp,
        RateMode::Mdp => ControlledMode::MdpLinearized,
    };
    let skeleton = solve_controlled_deterministic(scheme, &cfg.run.xi, &sol.v_star, &x0, cm)
        .map_err(runtime)?;
    let mut s = Summary::default();
    s.put("kind", "rate-min");
    solution_summary(&mut s, &sol);
    let mut out = Artifacts::default();
    out.push("control.csv", sol.v_star.to_csv());
    out.push("skeleton.csv", skeleton.to_csv());
    out.push("rate.txt", s.0);
    Ok(out)
}

fn tail(
    cfg: &ExperimentConfig,
    scheme: &Scheme,
    opts: &SimulationOptions,
) -> Result<Artifacts, HarnessError> {
    let init = initializer(cfg);
    let mode = match cfg.event.mode {
        EventMode::Ldp => TailMode::Ldp,
        EventMode::Mdp => TailMode::Mdp {
            beta: cfg.run.h_beta,
        },
    };
    let reference = match &init {
        Initializer::Fixed(_) => {
            let x0 = limit_path(cfg, scheme)?;
            let sol = minimize(cfg, scheme, &x0)?;
            sol.attained.then_some(sol.rate)
        }
        _ => None,
    };
    let set = Halfspace::new(cfg.event.normal.clone(), cfg.event.level);
    let rows = tail_probability_probe(
        scheme,
        mode,
        &init,
        &set,
        &cfg.run.eps,
        cfg.run.n_particles,
        cfg.run.seed,
        reference,
        opts,
    )
    .map_err(runtime)?;
    let mut csv = String::from("eps,h,n,hits,p_hat,normalized_decay,rate,censored\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(r.eps),
            opt_num(r.h),
            r.n_samples,
            r.hits,
            num(r.p_hat),
            opt_num(r.normalized_decay),
            opt_num(r.rate),
            r.censored
        )
        .unwrap();
    }
    let mut s = Summary::default();
    s.put("kind", "tail-probe");
    s.put("cells", rows.len());
    s.put("censored_cells", rows.iter().filter(|r| r.censored).count());
    match reference {
        Some(r) => s.num("reference_rate", r),
        None => s.put("reference_rate", "unavailable"),
    }
    let mut out = Artifacts::default();
    out.push("tail.csv", csv);
    out.push("summary.txt", s.0);
    Ok(out)
}

fn resolvent_method(cfg: &ExperimentConfig) -> ResolventMethod {
    match cfg.optimizer.resolvent.as_str() {
        "series" => ResolventMethod::Series {
            max_terms: cfg.optimizer.series_max_terms,
            tol: cfg.optimizer.series_tol,
        },
        _ => ResolventMethod::Direct,
    }
}

fn resolvent_table(cfg: &ExperimentConfig, scheme: &Scheme) -> Result<Artifacts, HarnessError> {
    let k = scheme.w1();
    let r = resolvent(k, resolvent_method(cfg)).map_err(runtime)?;
    let defect = resolvent_identity_defect(k, &r).map_err(runtime)?;
    let n = scheme.grid().n_steps();
    let mut csv = String::from("t,s,r\n");
    for (t, s, v) in r.triples() {
        writeln!(csv, "{},{},{}", num(t), num(s), num(v)).unwrap();
    }
    let mut s = Summary::default();
    s.put("kind", "resolvent");
    s.put("method", &cfg.optimizer.resolvent);
    s.num("r_at_T_0", r.get(n, 0));
    s.num("identity_defect_left", defect.left);
    s.num("identity_defect_right", defect.right);
    s.num("sup_row_mass", r.sup_row_mass());
    let mut out = Artifacts::default();
    out.push("resolvent.csv", csv);
    out.push("summary.txt", s.0);
    Ok(out)
}

fn kernel_probe(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let mut csv = String::from("kernel,h,d\n");
    let mut s = Summary::default();
    s.put("kind", "kernel-probe");
    s.num("t", cfg.probe.t);
    let kernels = [
        ("k1", Some(&cfg.kernels.k1)),
        ("k2", Some(&cfg.kernels.k2)),
        ("kc", cfg.kernels.kc.as_ref()),
    ];
    for (name, spec) in kernels {
        let Some(spec) = spec else { continue };
        let kernel = spec
            .build()
            .map_err(|e| HarnessError::Validation(vec![format!("kernels.{name}: {e}")]))?;
        let est = regularity_probe(&kernel, cfg.probe.t, &cfg.probe.steps, cfg.grid.horizon)
            .map_err(runtime)?;
        for (h, dh) in &est.samples {
            writeln!(csv, "{name},{},{}", num(*h), num(*dh)).unwrap();
        }
        s.num(&format!("{name}_gamma"), est.gamma);
        s.num(&format!("{name}_fit_residual"), est.fit_residual);
        let class =
            class_k_check(&kernel, cfg.grid.horizon, cfg.probe.class_k_times).map_err(runtime)?;
        s.put(
            &format!("{name}_class_k"),
            format!("{:?}", class.status).to_lowercase(),
        );
        s.num(&format!("{name}_sup_row_integral"), class.sup_row_integral);
        let gk = GridKernel::from_kernel(
            &kernel,
            Grid::new(cfg.grid.horizon, cfg.grid.n_steps).map_err(runtime)?,
        )
        .map_err(runtime)?;
        s.num(&format!("{name}_grid_row_mass"), gk.sup_row_mass());
    }
    let mut out = Artifacts::default();
    out.push("regularity.csv", csv);
    out.push("summary.txt", s.0);
    Ok(out)
}
