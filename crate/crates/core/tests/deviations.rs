use std::sync::Arc;

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use vmv_core::deviations::{
    ldp_rate, mdp_rate, minimize_rate_endpoint, tail_probability_probe, EndpointOptions, Halfspace,
    LdpSolver, RateMode, RateProblem, TailMode,
};
use vmv_core::volterra::{
    solve_controlled_deterministic, solve_deterministic_limit, ControlledMode, Initializer,
    LimitMethod,
};
use vmv_core::{
    Coefficients, ControlPath, CustomCoefficients, Grid, GridPath, Kernel, LinearMeanField, Scheme,
    VolterraModel,
};

fn scheme_with(k1: Kernel, k2: Kernel, coeffs: Arc<dyn Coefficients>, n: usize) -> Scheme {
    Scheme::new(
        &VolterraModel::new(k1, k2, coeffs),
        Grid::new(1.0, n).unwrap(),
    )
    .unwrap()
}

fn linear(a: f64, b: f64, s: f64, n: usize) -> Scheme {
    scheme_with(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        Arc::new(LinearMeanField::scalar(a, b, s)),
        n,
    )
}

fn limit(sch: &Scheme, xi: &[f64]) -> GridPath {
    solve_deterministic_limit(sch, xi, LimitMethod::Stepping)
        .unwrap()
        .path
}

#[test]
fn zero_target_costs_nothing() {
    let sch = linear(0.7, 0.0, 1.0, 50);
    let x0 = limit(&sch, &[1.0]);
    let sol = mdp_rate(&RateProblem::new(
        RateMode::Mdp,
        sch.clone(),
        x0,
        GridPath::constant(sch.grid(), &[0.0]),
    ))
    .unwrap();
    assert_eq!(sol.rate, 0.0);
    assert!(sol.v_star.is_zero() && sol.attained);
}

#[test]
fn pure_integration_rate() {
    let sch = linear(0.0, 0.0, 1.0, 1000);
    let x0 = limit(&sch, &[0.0]);
    let psi = GridPath::from_fn(sch.grid(), 1, |t, o| o[0] = t);
    let sol = mdp_rate(&RateProblem::new(RateMode::Mdp, sch, x0, psi)).unwrap();
    assert!((sol.rate - 0.5).abs() <= 1e-8, "{}", sol.rate);
    assert!(sol.v_star.values().iter().all(|v| (v - 1.0).abs() <= 1e-9));
    assert!(sol.attained && sol.residual <= 1e-12);
}

#[test]
fn linearized_exponential_rate() {
    let sch = linear(1.0, 0.0, 1.0, 1000);
    let x0 = limit(&sch, &[1.0]);
    let psi = GridPath::from_fn(sch.grid(), 1, |t, o| o[0] = t.exp() - 1.0);
    let sup = psi.sup_norm();
    let sol = mdp_rate(&RateProblem::new(RateMode::Mdp, sch, x0, psi)).unwrap();
    assert!((sol.rate - 0.5).abs() <= 5e-3, "{}", sol.rate);
    assert!(sol.residual <= 1e-3 * sup);
    let mid = sol.v_star.value(500)[0];
    assert!((mid - 1.0).abs() <= 1e-2, "{mid}");
}

#[test]
fn limit_path_has_zero_ldp_rate() {
    let sch = scheme_with(
        Kernel::power(0.3).unwrap(),
        Kernel::fbm(0.3).unwrap(),
        Arc::new(LinearMeanField::scalar(-0.5, 0.3, 0.8)),
        200,
    );
    let x0 = limit(&sch, &[1.0]);
    let sol = ldp_rate(
        &RateProblem::new(RateMode::Ldp, sch, x0.clone(), x0),
        LdpSolver::Triangular,
    )
    .unwrap();
    assert!(sol.rate <= 1e-20, "{}", sol.rate);
}

#[test]
fn schilder_rate() {
    let sch = linear(0.0, 0.0, 1.0, 400);
    let x0 = limit(&sch, &[0.0]);
    let phi = GridPath::from_fn(sch.grid(), 1, |t, o| o[0] = t);
    let sol = ldp_rate(
        &RateProblem::new(RateMode::Ldp, sch, x0, phi),
        LdpSolver::Triangular,
    )
    .unwrap();
    assert!((sol.rate - 0.5).abs() <= 1e-10);
}

#[test]
fn constant_control_round_trip() {
    let sch = linear(1.0, 0.0, 1.0, 500);
    let x0 = limit(&sch, &[1.0]);
    let c = 1.3;
    let v = ControlPath::constant(sch.grid(), &[c]);
    let phi = solve_controlled_deterministic(&sch, &[1.0], &v, &x0, ControlledMode::Ldp).unwrap();
    let sol = ldp_rate(
        &RateProblem::new(RateMode::Ldp, sch, x0, phi),
        LdpSolver::Triangular,
    )
    .unwrap();
    assert!(sol.v_star.values().iter().all(|x| (x - c).abs() <= 1e-6));
    assert!((sol.rate - 0.5 * c * c).abs() <= 1e-6);
}

#[test]
fn descent_cross_checks_the_triangular_solve() {
    let coeffs = LinearMeanField::scalar(-0.4, 0.0, 1.0)
        .with_sigma1(vec![0.2])
        .unwrap();
    let sch = scheme_with(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        Arc::new(coeffs),
        40,
    );
    let x0 = limit(&sch, &[1.0]);
    let v = ControlPath::from_fn(sch.grid(), 1, |t, o| o[0] = (3.0 * t).sin());
    let phi = solve_controlled_deterministic(&sch, &[1.0], &v, &x0, ControlledMode::Ldp).unwrap();
    let problem = RateProblem::new(RateMode::Ldp, sch, x0, phi);
    let direct = ldp_rate(&problem, LdpSolver::Triangular).unwrap();
    let descent = ldp_rate(
        &problem,
        LdpSolver::Descent {
            max_iter: 200_000,
            step: None,
            tol: 1e-13,
        },
    )
    .unwrap();
    assert!(descent.iterations > 1);
    assert!(
        (direct.rate - descent.rate).abs() <= 1e-6 * direct.rate,
        "{} vs {}",
        direct.rate,
        descent.rate
    );
}

#[test]
fn unreachable_target_is_reported() {
    // d = 2, m = 1: noise only in the first coordinate
    let coeffs =
        LinearMeanField::new(2, 1, vec![0.0; 4], vec![0.0; 4], vec![1.0, 0.0], None).unwrap();
    let sch = scheme_with(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        Arc::new(coeffs),
        20,
    );
    let x0 = limit(&sch, &[0.0, 0.0]);
    let target = GridPath::from_fn(sch.grid(), 2, |t, o| {
        o[0] = t;
        o[1] = t;
    });
    let problem = RateProblem::new(RateMode::Ldp, sch, x0, target);
    assert!(ldp_rate(&problem, LdpSolver::Triangular).is_err());
    let sol = ldp_rate(&problem.with_regularization(1e-12), LdpSolver::Triangular).unwrap();
    assert!(!sol.attained && sol.diagnostic.is_some());
    assert!((sol.residual - 1.0).abs() <= 1e-6);
    assert!((sol.rate - 0.5).abs() <= 1e-6);
}

#[test]
fn problem_validation() {
    let sch = linear(0.0, 0.0, 1.0, 10);
    let x0 = limit(&sch, &[1.0]);
    let shifted = GridPath::constant(sch.grid(), &[2.0]);
    assert!(ldp_rate(
        &RateProblem::new(RateMode::Ldp, sch.clone(), x0.clone(), shifted.clone()),
        LdpSolver::Triangular
    )
    .is_err());
    assert!(mdp_rate(&RateProblem::new(
        RateMode::Mdp,
        sch.clone(),
        x0.clone(),
        shifted
    ))
    .is_err());
    let other = GridPath::constant(Grid::new(1.0, 11).unwrap(), &[1.0]);
    assert!(ldp_rate(
        &RateProblem::new(RateMode::Ldp, sch.clone(), x0.clone(), other),
        LdpSolver::Triangular
    )
    .is_err());
    assert!(mdp_rate(&RateProblem::new(
        RateMode::Ldp,
        sch.clone(),
        x0.clone(),
        x0.clone()
    ))
    .is_err());
    let negative = RateProblem::new(RateMode::Ldp, sch, x0.clone(), x0).with_regularization(-1.0);
    assert!(ldp_rate(&negative, LdpSolver::Triangular).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mdp_rate_is_quadratic(c in -5.0f64..5.0, w in 0.5f64..4.0) {
        let sch = scheme_with(Kernel::power(0.3).unwrap(), Kernel::fbm(0.3).unwrap(), Arc::new(LinearMeanField::scalar(0.6, 0.2, 1.0)), 60);
        let x0 = limit(&sch, &[1.0]);
        let psi = GridPath::from_fn(sch.grid(), 1, |t, o| o[0] = (w * t).sin() + t * t);
        let base = mdp_rate(&RateProblem::new(RateMode::Mdp, sch.clone(), x0.clone(), psi.clone())).unwrap().rate;
        let scaled = mdp_rate(&RateProblem::new(RateMode::Mdp, sch, x0, psi.scaled(c))).unwrap().rate;
        prop_assert!((scaled - c * c * base).abs() <= 1e-10 * (1.0 + c * c * base));
    }

    #[test]
    fn ldp_round_trip(coefs in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let coeffs = CustomCoefficients::new(
            1,
            1,
            |_, x, _, o| o[0] = x[0].sin() - 0.5 * x[0],
            |_, x, _, o| o[0] = 1.0 + 0.3 * x[0].cos(),
        );
        let sch = scheme_with(Kernel::power(0.35).unwrap(), Kernel::constant(1.0), Arc::new(coeffs), 80);
        let x0 = limit(&sch, &[0.5]);
        let v = ControlPath::from_fn(sch.grid(), 1, |t, o| {
            o[0] = coefs.iter().enumerate().map(|(k, a)| a * (k as f64 * 3.0 * t).cos()).sum();
        });
        let phi = solve_controlled_deterministic(&sch, &[0.5], &v, &x0, ControlledMode::Ldp).unwrap();
        let sol = ldp_rate(&RateProblem::new(RateMode::Ldp, sch, x0, phi), LdpSolver::Triangular).unwrap();
        prop_assert!(sol.rate <= v.energy() + 1e-9);
        prop_assert!((sol.rate - v.energy()).abs() <= 1e-6);
        prop_assert!(sol.attained);
    }
}

fn endpoint(
    sch: &Scheme,
    mode: RateMode,
    xi: &[f64],
    level: f64,
) -> vmv_core::deviations::RateSolution {
    let x0 = limit(sch, xi);
    let init = ControlPath::zero(sch.grid(), sch.dims().1);
    let set = Halfspace::new(vec![1.0; sch.dims().0], level);
    minimize_rate_endpoint(sch, mode, xi, &x0, &set, &init, &EndpointOptions::default()).unwrap()
}

#[test]
fn endpoint_already_reached() {
    let sch = linear(1.0, 0.0, 1.0, 50);
    let sol = endpoint(&sch, RateMode::Ldp, &[1.0], 2.0);
    assert_eq!(sol.rate, 0.0);
    assert!(sol.attained && sol.v_star.is_zero());
}

#[test]
fn endpoint_rates_of_pure_integration() {
    let sch = linear(0.0, 0.0, 1.0, 200);
    for (level, rate) in [(1.0, 0.5), (2.0, 2.0)] {
        let sol = endpoint(&sch, RateMode::Mdp, &[0.0], level);
        assert!(sol.attained);
        assert!((sol.rate - rate).abs() <= 1e-9, "{} vs {rate}", sol.rate);
        assert!(sol
            .v_star
            .values()
            .iter()
            .all(|v| (v - level).abs() <= 1e-6));
    }
}

#[test]
fn endpoint_rate_is_monotone_in_the_set() {
    let coeffs = CustomCoefficients::new(
        1,
        1,
        |_, x, _, o| o[0] = -x[0] + 0.3 * x[0].sin(),
        |_, x, _, o| o[0] = 1.0 + 0.2 * x[0].cos(),
    );
    let sch = scheme_with(
        Kernel::power(0.3).unwrap(),
        Kernel::constant(1.0),
        Arc::new(coeffs),
        60,
    );
    let rates: Vec<f64> = [1.5, 1.0, 0.8, 0.6]
        .iter()
        .map(|&level| {
            let sol = endpoint(&sch, RateMode::Ldp, &[0.2], level);
            assert!(sol.attained, "{:?}", sol.diagnostic);
            sol.rate
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{rates:?}");
    assert!(rates.iter().all(|r| *r > 0.0));
}

#[test]
fn nonlinear_endpoint_beats_constant_controls() {
    let coeffs = CustomCoefficients::new(
        1,
        1,
        |_, x, _, o| o[0] = x[0].sin(),
        |_, x, _, o| o[0] = 1.0 + 0.5 * x[0] * x[0] / (1.0 + x[0] * x[0]),
    );
    let sch = scheme_with(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        Arc::new(coeffs),
        100,
    );
    let x0 = limit(&sch, &[0.0]);
    let sol = endpoint(&sch, RateMode::Ldp, &[0.0], 1.5);
    assert!(sol.attained);
    // bisection on constant controls gives a feasible upper bound
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..60 {
        let c = 0.5 * (lo + hi);
        let v = ControlPath::constant(sch.grid(), &[c]);
        let end = solve_controlled_deterministic(&sch, &[0.0], &v, &x0, ControlledMode::Ldp)
            .unwrap()
            .terminal()[0];
        if end >= 1.5 {
            hi = c;
        } else {
            lo = c;
        }
    }
    assert!(
        sol.rate <= 0.5 * hi * hi + 1e-9,
        "{} vs {}",
        sol.rate,
        0.5 * hi * hi
    );
}

#[test]
fn endpoint_input_validation() {
    let sch = linear(0.0, 0.0, 1.0, 10);
    let x0 = limit(&sch, &[0.0]);
    let init = ControlPath::zero(sch.grid(), 1);
    let bad = Halfspace::new(vec![1.0, 1.0], 1.0);
    assert!(minimize_rate_endpoint(
        &sch,
        RateMode::Ldp,
        &[0.0],
        &x0,
        &bad,
        &init,
        &EndpointOptions::default()
    )
    .is_err());
    let wrong = ControlPath::zero(Grid::new(1.0, 5).unwrap(), 1);
    let set = Halfspace::new(vec![1.0], 1.0);
    assert!(minimize_rate_endpoint(
        &sch,
        RateMode::Ldp,
        &[0.0],
        &x0,
        &set,
        &wrong,
        &EndpointOptions::default()
    )
    .is_err());
}

#[test]
fn tail_of_the_whole_space() {
    let sch = linear(0.0, 0.0, 1.0, 20);
    let set = Halfspace::new(vec![0.0], 0.0);
    let rows = tail_probability_probe(
        &sch,
        TailMode::Ldp,
        &Initializer::Fixed(vec![0.0]),
        &set,
        &[0.5, 0.1],
        100,
        1,
        None,
        &Default::default(),
    )
    .unwrap();
    for r in rows {
        assert_eq!(r.p_hat, 1.0);
        assert_eq!(r.normalized_decay, Some(0.0));
        assert!(!r.censored);
    }
}

#[test]
fn gaussian_tail_matches_closed_form() {
    let sch = linear(0.0, 0.0, 1.0, 20);
    let set = Halfspace::new(vec![1.0], 1.0);
    let eps_list = [1.0, 0.5, 0.25, 0.1, 1e-2];
    let n = 40_000;
    let rows = tail_probability_probe(
        &sch,
        TailMode::Ldp,
        &Initializer::Fixed(vec![0.0]),
        &set,
        &eps_list,
        n,
        7,
        Some(0.5),
        &Default::default(),
    )
    .unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for r in &rows[..4] {
        let p = normal.sf(1.0 / r.eps.sqrt());
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (r.p_hat - p).abs() <= 4.0 * se,
            "eps {}: {} vs {p}",
            r.eps,
            r.p_hat
        );
        assert_eq!(r.rate, Some(0.5));
    }
    // P(N(0,1) ≥ 10) is far below what 4e4 samples resolve
    let last = &rows[4];
    assert!(last.censored && last.hits == 0 && last.normalized_decay.is_none());
}

#[test]
fn moderate_tail_is_within_a_factor_two_of_the_rate() {
    let sch = linear(1.0, 0.5, 1.0, 50);
    let level = 0.45;
    let rate = endpoint(&sch, RateMode::Mdp, &[1.0], level).rate;
    let set = Halfspace::new(vec![1.0], level);
    let rows = tail_probability_probe(
        &sch,
        TailMode::Mdp { beta: 0.25 },
        &Initializer::Fixed(vec![1.0]),
        &set,
        &[1e-1, 1e-2, 1e-3, 1e-4],
        20_000,
        3,
        Some(rate),
        &Default::default(),
    )
    .unwrap();
    let smallest = rows.last().unwrap();
    assert_eq!(smallest.h, Some(10.0));
    let decay = smallest.normalized_decay.expect("hits at the smallest eps");
    assert!(
        decay >= 0.5 * rate && decay <= 2.0 * rate,
        "{decay} vs {rate}"
    );
}

#[test]
fn tail_input_validation() {
    let sch = linear(0.0, 0.0, 1.0, 10);
    let set = Halfspace::new(vec![1.0], 1.0);
    let init = Initializer::Fixed(vec![0.0]);
    let run = |mode, eps: &[f64], n| {
        tail_probability_probe(
            &sch,
            mode,
            &init,
            &set,
            eps,
            n,
            0,
            None,
            &Default::default(),
        )
    };
    assert!(run(TailMode::Ldp, &[0.0], 10).is_err());
    assert!(run(TailMode::Ldp, &[0.5], 0).is_err());
    assert!(run(TailMode::Mdp { beta: 0.5 }, &[0.5], 10).is_err());
    let random = Initializer::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    assert!(tail_probability_probe(
        &sch,
        TailMode::Mdp { beta: 0.25 },
        &random,
        &set,
        &[0.5],
        10,
        0,
        None,
        &Default::default()
    )
    .is_err());
}
