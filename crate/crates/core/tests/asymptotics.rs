use std::sync::Arc;

use vmv_core::asymptotics::{
    clt_gap, clt_pair, holder_probe, scaling_regression, sup_moment, AsymptoticsError,
};
use vmv_core::stats::{mean, skew_kurtosis, standard_error, variance};
use vmv_core::volterra::{simulate_particles, Initializer, SimulationOptions};
use vmv_core::{CustomCoefficients, Grid, Kernel, LinearMeanField, Scheme, VolterraModel};

fn scheme(k1: Kernel, k2: Kernel, coeffs: LinearMeanField, n: usize) -> Scheme {
    let model = VolterraModel::new(k1, k2, Arc::new(coeffs));
    Scheme::new(&model, Grid::new(1.0, n).unwrap()).unwrap()
}

fn fixed(x: f64) -> Initializer {
    Initializer::Fixed(vec![x])
}

#[test]
fn zero_drift_fluctuations_coincide() {
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::fbm(0.3).unwrap(),
        LinearMeanField::scalar(0.0, 0.0, 0.7),
        50,
    );
    for eps in [0.5, 1e-3, 1e-8] {
        let pair = clt_pair(&sch, &fixed(0.3), eps, 200, 4, &Default::default()).unwrap();
        assert_eq!(pair.z_eps.state(7, 0), &[0.0]);
        assert_eq!(pair.z_lim.state(7, 0), &[0.0]);
        assert_eq!(pair.z_eps, pair.z_lim);
        assert_eq!(clt_gap(&pair, 2.0).unwrap().moment, 0.0);
    }
}

#[test]
fn ou_limit_variance_and_gaussianity() {
    let a = -1.0;
    let n = 200;
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(a, 0.0, 1.0),
        n,
    );
    let pair = clt_pair(&sch, &fixed(1.0), 0.01, 100_000, 12, &Default::default()).unwrap();
    let zt = pair.z_lim.component_at(n, 0);
    let oracle = ((2.0 * a).exp() - 1.0) / (2.0 * a);
    let var = variance(&zt);
    assert!((var - oracle).abs() <= 0.02 * oracle, "{var} vs {oracle}");
    let (skew, kurt) = skew_kurtosis(&zt);
    assert!(
        skew.abs() <= 0.05 && kurt.abs() <= 0.1,
        "skew {skew} kurtosis {kurt}"
    );
}

#[test]
fn measure_term_keeps_the_mean_at_zero() {
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(0.0, 0.8, 1.0),
        100,
    );
    let pair = clt_pair(&sch, &fixed(0.5), 0.01, 20_000, 3, &Default::default()).unwrap();
    for i in [50, 100] {
        let z = pair.z_lim.component_at(i, 0);
        assert!(mean(&z).abs() <= 3.0 * standard_error(&z));
    }
}

#[test]
fn linear_model_gap_is_rounding_only() {
    // with linear drift and additive noise the fluctuation equation is exact
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(1.0, 0.5, 1.0),
        100,
    );
    let pair = clt_pair(&sch, &fixed(1.0), 1e-12, 1000, 5, &Default::default()).unwrap();
    let typical = mean(&pair.z_lim.sup_distances_to(&pair.x0.scaled(0.0)).unwrap());
    let gap = clt_gap(&pair, 1.0).unwrap();
    assert!(gap.moment <= 1e-5 * typical, "{} vs {typical}", gap.moment);
}

#[test]
fn multiplicative_noise_gap_decreases_with_eps() {
    let coeffs = LinearMeanField::scalar(1.0, 0.5, 1.0)
        .with_sigma1(vec![0.5])
        .unwrap();
    let sch = scheme(Kernel::constant(1.0), Kernel::constant(1.0), coeffs, 100);
    let eps_list = [1e-1, 1e-2, 1e-3, 1e-4];
    let gaps: Vec<f64> = eps_list
        .iter()
        .map(|&e| {
            clt_gap(
                &clt_pair(&sch, &fixed(1.0), e, 4000, 8, &Default::default()).unwrap(),
                2.0,
            )
            .unwrap()
            .moment
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    let pts: Vec<_> = eps_list.iter().copied().zip(gaps).collect();
    let fit = scaling_regression(&pts, 1.0).unwrap();
    assert!(fit.within(0.2), "slope {}", fit.slope);
}

#[test]
fn uncoupled_pair_is_rejected() {
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(1.0, 0.0, 1.0),
        20,
    );
    let mut pair = clt_pair(&sch, &fixed(1.0), 0.1, 10, 1, &Default::default()).unwrap();
    pair.z_lim = clt_pair(&sch, &fixed(1.0), 0.1, 10, 2, &Default::default())
        .unwrap()
        .z_lim;
    assert_eq!(clt_gap(&pair, 2.0), Err(AsymptoticsError::Uncoupled));
}

#[test]
fn clt_preconditions() {
    let sch = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(1.0, 0.0, 1.0),
        20,
    );
    let random = Initializer::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    assert!(matches!(
        clt_pair(&sch, &random, 0.1, 10, 1, &Default::default()),
        Err(AsymptoticsError::InvalidParameter(_))
    ));
    assert!(clt_pair(&sch, &fixed(0.0), 0.0, 10, 1, &Default::default()).is_err());
    let no_derivatives = CustomCoefficients::new(
        1,
        1,
        |_, x, _, o| o[0] = x[0].sin(),
        |_, _, _, o| o[0] = 1.0,
    );
    let model = VolterraModel::new(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        Arc::new(no_derivatives),
    );
    let sch = Scheme::new(&model, Grid::new(1.0, 10).unwrap()).unwrap();
    assert!(matches!(
        clt_pair(&sch, &fixed(0.0), 0.1, 10, 1, &Default::default()),
        Err(AsymptoticsError::Coefficient(_))
    ));
}

#[test]
fn moments_stay_bounded_in_eps() {
    let sch = scheme(
        Kernel::power(0.3).unwrap(),
        Kernel::fbm(0.3).unwrap(),
        LinearMeanField::scalar(1.0, 0.5, 1.0),
        50,
    );
    let moments: Vec<f64> = [1.0, 0.3, 0.1, 0.03, 0.01]
        .iter()
        .map(|&e| {
            sup_moment(
                &simulate_particles(&sch, &fixed(1.0), e, 5000, 2, &Default::default()).unwrap(),
                2.0,
            )
        })
        .collect();
    let cap = 2.0 * moments[0];
    assert!(
        moments.iter().all(|m| m.is_finite() && *m <= cap),
        "{moments:?}"
    );
}

#[test]
fn holder_statistic_examples() {
    let flat = scheme(
        Kernel::constant(1.0),
        Kernel::constant(1.0),
        LinearMeanField::scalar(0.0, 0.0, 1.0),
        40,
    );
    let still = simulate_particles(&flat, &fixed(2.0), 0.0, 3, 0, &Default::default()).unwrap();
    assert_eq!(holder_probe(&still, 0.5, 2.0).unwrap().stat, 0.0);

    let ramp = CustomCoefficients::new(1, 1, |_, _, _, o| o[0] = 1.0, |_, _, _, o| o[0] = 0.0);
    let model = VolterraModel::new(Kernel::constant(1.0), Kernel::constant(1.0), Arc::new(ramp));
    let sch = Scheme::new(&model, Grid::new(1.0, 40).unwrap()).unwrap();
    let line = simulate_particles(&sch, &fixed(0.0), 0.0, 2, 0, &Default::default()).unwrap();
    assert!((holder_probe(&line, 1.0, 1.0).unwrap().stat - 1.0).abs() <= 1e-12);

    assert!(holder_probe(&line, 0.0, 1.0).is_err());
    assert!(holder_probe(&line, 1.5, 1.0).is_err());
}

#[test]
fn holder_statistic_is_stable_under_refinement() {
    let stats: Vec<f64> = [100, 200, 400]
        .iter()
        .map(|&n| {
            let sch = scheme(
                Kernel::constant(1.0),
                Kernel::fbm(0.7).unwrap(),
                LinearMeanField::scalar(0.0, 0.0, 1.0),
                n,
            );
            let ens = simulate_particles(
                &sch,
                &fixed(0.0),
                1.0,
                200,
                6,
                &SimulationOptions::default(),
            )
            .unwrap();
            holder_probe(&ens, 0.6, 2.0).unwrap().stat
        })
        .collect();
    for w in stats.windows(2) {
        let r = w[1] / w[0];
        assert!(r.is_finite() && (0.5..=2.0).contains(&r), "{stats:?}");
    }
}
