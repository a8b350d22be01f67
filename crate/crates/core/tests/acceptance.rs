//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! fails if any criterion is red.

use std::sync::Arc;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Normal};
use vmv_core::asymptotics::{clt_gap, clt_pair, scaling_regression, sup_deviation_moment};
use vmv_core::deviations::{
    ldp_rate, mdp_rate, minimize_rate_endpoint, tail_probability_probe, EndpointOptions, Halfspace,
    LdpSolver, RateMode, RateProblem, TailMode,
};
use vmv_core::harness::rng::{Purpose, RngStream};
use vmv_core::harness::{execute, rerun, validate_config, ModelRegistry, MANIFEST_NAME};
use vmv_core::kernels::{
    default_steps, gronwall_check, regularity_probe, resolvent, ResolventMethod,
};
use vmv_core::stats::variance;
use vmv_core::volterra::{
    simulate_particles, solve_controlled_deterministic, solve_deterministic_limit, ControlledMode,
    Initializer, LimitMethod,
};
use vmv_core::{
    ControlPath, Grid, GridKernel, GridPath, Kernel, LinearMeanField, Scheme, VolterraModel,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scheme(k1: Kernel, k2: Kernel, coeffs: LinearMeanField, n: usize) -> Scheme {
    Scheme::new(
        &VolterraModel::new(k1, k2, Arc::new(coeffs)),
        Grid::new(1.0, n).unwrap(),
    )
    .unwrap()
}

fn limit(sch: &Scheme, xi: &[f64]) -> GridPath {
    solve_deterministic_limit(sch, xi, LimitMethod::Stepping)
        .unwrap()
        .path
}

fn builtin(n: usize) -> Scheme {
    scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(1.0, 0.5, 1.0),
        n,
    )
}

const EPS_LIST: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

fn resolvent_oracle() -> Outcome {
    let started = Instant::now();
    let k = GridKernel::from_kernel(&Kernel::constant(1.0), Grid::new(1.0, 1000).unwrap()).unwrap();
    let direct = resolvent(&k, ResolventMethod::Direct).unwrap();
    let series = resolvent(
        &k,
        ResolventMethod::Series {
            max_terms: 200,
            tol: 1e-12,
        },
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let g = k.grid();
    let mut worst = 0.0f64;
    for i in 1..=g.n_steps() {
        for j in 0..i {
            let exact = (g.time(i) - g.time(j)).exp();
            worst = worst.max((direct.get(i, j) - exact).abs() / exact);
        }
    }
    let agree = direct.max_abs_diff(&series).unwrap();
    outcome(
        worst <= 0.02 && agree <= 1e-8 && elapsed < 5.0,
        format!("max rel err {worst:.3e} (<= 2e-2), series vs direct {agree:.3e} (<= 1e-8), {elapsed:.2} s (< 5 s)"),
    )
}

fn gronwall_identity() -> Outcome {
    let rng = RngStream::new(11, Purpose::Sampler);
    let grid = Grid::new(1.0, 200).unwrap();
    let mut satisfied = 0;
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let u = |c: u64| rng.uniform(case, 0, c);
        let kernel = match case % 3 {
            0 => Kernel::constant(0.1 + 2.0 * u(0)),
            1 => Kernel::power(0.05 + 0.9 * u(0)).unwrap(),
            _ => Kernel::fbm(0.1 + 0.8 * u(0)).unwrap(),
        };
        let k = GridKernel::from_kernel(&kernel, grid).unwrap();
        let (a, b) = (2.0 * u(1), 3.0 * u(2));
        let g: Vec<f64> = grid.times().iter().map(|t| a + b * t * t).collect();
        let rep = gronwall_check(&k, &g).unwrap();
        if rep.satisfied {
            satisfied += 1;
        }
        let scale = rep
            .bound
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        worst = worst.max(rep.max_gap / scale);
    }
    outcome(
        satisfied == 50 && worst <= 0.02,
        format!(
            "{satisfied}/50 satisfied, saturating vs g + R*g max rel gap {worst:.3e} (<= 2e-2)"
        ),
    )
}

fn kernel_regularity() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for h in [0.25, 0.5, 0.75] {
        let est = regularity_probe(&Kernel::power(h).unwrap(), 0.5, &default_steps(), 1.0).unwrap();
        pass &= (est.gamma - h).abs() <= 0.02;
        parts.push(format!("H={h}: {:.4}", est.gamma));
    }
    outcome(pass, format!("{} (tol 0.02)", parts.join(", ")))
}

fn fbm_variance() -> Outcome {
    let started = Instant::now();
    let k2 = Kernel::fbm(0.7).unwrap();
    let sch = scheme(
        Kernel::constant(1.0),
        k2.clone(),
        LinearMeanField::scalar(0.0, 0.0, 1.0),
        200,
    );
    let ens = simulate_particles(
        &sch,
        &Initializer::Fixed(vec![0.0]),
        1.0,
        100_000,
        1,
        &Default::default(),
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    let mut pass = elapsed < 120.0;
    for (t, i) in [(0.25, 50), (0.5, 100), (1.0, 200)] {
        let oracle = k2.integrate(t, 0.0, t, 2).unwrap();
        let var = variance(&ens.component_at(i, 0));
        let rel = (var - oracle).abs() / oracle;
        pass &= rel <= 0.05;
        parts.push(format!("t={t}: {var:.4} vs {oracle:.4}"));
    }
    outcome(
        pass,
        format!("{} (5%), {elapsed:.1} s (< 120 s)", parts.join(", ")),
    )
}

fn strong_scaling() -> Outcome {
    let sch = builtin(200);
    let x0 = limit(&sch, &[1.0]);
    let mut points = Vec::new();
    for eps in EPS_LIST {
        let ens = simulate_particles(
            &sch,
            &Initializer::Fixed(vec![1.0]),
            eps,
            10_000,
            3,
            &Default::default(),
        )
        .unwrap();
        points.push((eps, sup_deviation_moment(&ens, &x0, 1.0).unwrap().moment));
    }
    let fit = scaling_regression(&points, 0.5).unwrap();
    outcome(
        fit.within(0.1),
        format!("slope {:.4} (0.5 ± 0.1), r2 {:.4}", fit.slope, fit.r2),
    )
}

fn clt_slope(sch: &Scheme, xi: f64) -> (f64, Vec<(f64, f64)>) {
    let mut points = Vec::new();
    for eps in EPS_LIST {
        let pair = clt_pair(
            sch,
            &Initializer::Fixed(vec![xi]),
            eps,
            10_000,
            5,
            &Default::default(),
        )
        .unwrap();
        points.push((eps, clt_gap(&pair, 2.0).unwrap().moment));
    }
    let slope = scaling_regression(&points, 1.0).map_or(f64::NAN, |f| f.slope);
    (slope, points)
}

fn clt_gap_rate() -> Outcome {
    let (slope, points) = clt_slope(&builtin(200), 1.0);
    let control = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(0.0, 0.0, 1.0),
        200,
    );
    let zero_gap = EPS_LIST.iter().all(|&eps| {
        let pair = clt_pair(
            &control,
            &Initializer::Fixed(vec![1.0]),
            eps,
            10_000,
            5,
            &Default::default(),
        )
        .unwrap();
        clt_gap(&pair, 2.0).unwrap().moment == 0.0
    });
    let gaps: Vec<String> = points
        .iter()
        .map(|(e, g)| format!("{e:.0e}:{g:.2e}"))
        .collect();
    outcome(
        (slope - 1.0).abs() <= 0.2 && zero_gap,
        format!(
            "slope {slope:.4} (1.0 ± 0.2), gaps [{}], b = 0 gap identically zero: {zero_gap}",
            gaps.join(" ")
        ),
    )
}

fn mdp_exactness() -> Outcome {
    let sch = Scheme::new(
        &VolterraModel::new(
            Kernel::constant(1.0),
            Kernel::fbm(0.3).unwrap(),
            Arc::new(LinearMeanField::scalar(0.0, 0.4, 1.0)),
        )
        .with_control_kernel(Kernel::constant(1.0)),
        Grid::new(1.0, 500).unwrap(),
    )
    .unwrap();
    let x0 = limit(&sch, &[1.0]);
    let psi = GridPath::from_fn(sch.grid(), 1, |t, o| o[0] = t);
    let base = mdp_rate(&RateProblem::new(
        RateMode::Mdp,
        sch.clone(),
        x0.clone(),
        psi.clone(),
    ))
    .unwrap();
    let mut worst = 0.0f64;
    for c in [-3.0, 0.5, 2.0, 7.5] {
        let scaled = mdp_rate(&RateProblem::new(
            RateMode::Mdp,
            sch.clone(),
            x0.clone(),
            psi.scaled(c),
        ))
        .unwrap();
        worst = worst.max((scaled.rate - c * c * base.rate).abs());
    }
    let err = (base.rate - 0.5).abs();
    outcome(
        err <= 1e-8 && worst <= 1e-10,
        format!(
            "rate {:.12} (0.5 ± 1e-8), scaling defect {worst:.2e} (<= 1e-10)",
            base.rate
        ),
    )
}

fn ldp_round_trip() -> Outcome {
    let coeffs = LinearMeanField::scalar(1.0, 0.5, 1.0)
        .with_sigma1(vec![0.3])
        .unwrap();
    let sch = scheme(
        Kernel::power(0.7).unwrap(),
        Kernel::constant(1.0),
        coeffs,
        100,
    );
    let xi = [1.0];
    let x0 = limit(&sch, &xi);
    let rng = RngStream::new(8, Purpose::Control);
    let mut worst_rate = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut all_attained = true;
    for case in 0..20u64 {
        let (a, b, c) = (
            rng.normal(case, 0, 0),
            rng.normal(case, 0, 1),
            rng.normal(case, 0, 2),
        );
        let v = ControlPath::from_fn(sch.grid(), 1, |t, o| {
            o[0] = 0.4 * a + 0.4 * b * (3.0 * t).sin() + 0.2 * c * t
        });
        let phi = solve_controlled_deterministic(&sch, &xi, &v, &x0, ControlledMode::Ldp).unwrap();
        let sol = ldp_rate(
            &RateProblem::new(RateMode::Ldp, sch.clone(), x0.clone(), phi),
            LdpSolver::Triangular,
        )
        .unwrap();
        worst_rate = worst_rate.max((sol.rate - v.energy()).abs());
        worst_residual = worst_residual.max(sol.residual);
        all_attained &= sol.attained;
    }
    outcome(
        worst_rate <= 1e-6 && all_attained,
        format!("max |rate - energy| {worst_rate:.2e} (<= 1e-6), max residual {worst_residual:.2e}, all within scheme tolerance: {all_attained}"),
    )
}

fn gaussian_tail() -> (Outcome, Outcome) {
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(0.0, 0.0, 1.0),
        10,
    );
    let set = Halfspace::new(vec![1.0], 1.0);
    let n = 1_000_000;
    let rows = tail_probability_probe(
        &sch,
        TailMode::Ldp,
        &Initializer::Fixed(vec![0.0]),
        &set,
        &[1e-2],
        n,
        17,
        Some(0.5),
        &Default::default(),
    )
    .unwrap();
    let row = &rows[0];
    let exact = -1e-2 * Normal::new(0.0, 1.0).unwrap().sf(10.0).ln();
    let mc = match row.normalized_decay {
        Some(decay) => outcome(
            (decay - 0.5).abs() <= 0.15 * 0.5,
            format!("-eps log p_hat = {decay:.4} at eps = 1e-2 (0.5 ± 15%), hits {}/{n}", row.hits),
        ),
        None => outcome(
            false,
            format!(
                "censored: 0/{n} hits at eps = 1e-2 (P = Phi_bar(10) = {:.2e}); exact -eps log P = {exact:.4}",
                Normal::new(0.0, 1.0).unwrap().sf(10.0)
            ),
        ),
    };
    let x0 = limit(&sch, &[0.0]);
    let sol = minimize_rate_endpoint(
        &sch,
        RateMode::Ldp,
        &[0.0],
        &x0,
        &set,
        &ControlPath::zero(sch.grid(), 1),
        &EndpointOptions::default(),
    )
    .unwrap();
    let opt = outcome(
        (sol.rate - 0.5).abs() <= 1e-6,
        format!("rate_min {:.9} (0.5 ± 1e-6)", sol.rate),
    );
    (mc, opt)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let registry = ModelRegistry::builtin();
    let configs = [
        "kind = \"simulate\"\n[model]\na = 1.0\nb = 0.5\n[kernels]\nk2 = { family = \"fbm\", hurst = 0.7 }\n\
         [grid]\nn_steps = 50\n[run]\nn_particles = 2000\nxi = 1.0\nseed = 99\n",
        "kind = \"clt\"\n[model]\na = 1.0\nb = 0.5\nsigma1 = 0.5\n[grid]\nn_steps = 50\n\
         [run]\nn_particles = 2000\nxi = 1.0\n",
        "kind = \"tail-probe\"\n[grid]\nn_steps = 20\n[run]\nn_particles = 20000\neps = [0.5, 0.2, 0.1]\n",
    ];
    let max = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .max(4);
    let mut counts = Vec::new();
    for (k, text) in configs.iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let mut cfg = validate_config(text).unwrap();
        cfg.output_dir = out.clone();
        let first = execute(&cfg, &registry, None).unwrap();
        let csvs = first
            .artifacts
            .files
            .iter()
            .filter(|(n, _)| n.ends_with(".csv"))
            .count();
        for workers in [1, max] {
            let target = tmp.path().join(format!("run{k}_w{workers}"));
            let r = rerun(
                &out.join(MANIFEST_NAME),
                Some(&target),
                &registry,
                Some(workers),
            )
            .unwrap();
            if !r.identical() {
                return outcome(
                    false,
                    format!(
                        "{} differs at {workers} workers: {:?}",
                        cfg.kind, r.mismatched
                    ),
                );
            }
        }
        counts.push(format!("{} ({csvs} csv)", cfg.kind));
    }
    outcome(
        true,
        format!(
            "{} bitwise identical at 1 and {max} workers",
            counts.join(", ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let (tail_mc, tail_opt) = gaussian_tail();
    let results = [
        ("1", "resolvent oracle", resolvent_oracle()),
        ("2", "gronwall identity", gronwall_identity()),
        ("3", "kernel regularity", kernel_regularity()),
        ("4", "fbm variance", fbm_variance()),
        ("5", "strong sqrt(eps) scaling", strong_scaling()),
        ("6", "clt gap rate", clt_gap_rate()),
        ("7", "mdp rate exactness", mdp_exactness()),
        ("8", "ldp round trip", ldp_round_trip()),
        ("9a", "gaussian tail, monte carlo", tail_mc),
        ("9b", "gaussian tail, rate minimization", tail_opt),
        ("10", "reproducibility", reproducibility()),
    ];
    for (id, name, o) in &results {
        println!(
            "criterion {id}: {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }

    // context for the red lines above, not part of any criterion
    let mult = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(1.0, 0.5, 1.0)
            .with_sigma1(vec![0.5])
            .unwrap(),
        200,
    );
    let (slope, _) = clt_slope(&mult, 1.0);
    println!("note: clt gap slope with state-dependent noise (sigma = 1 + 0.5 x): {slope:.4}");

    let red: Vec<&str> = results
        .iter()
        .filter(|(_, _, o)| !o.pass)
        .map(|(id, _, _)| *id)
        .collect();
    assert!(red.is_empty(), "criteria failing: {}", red.join(", "));
}
