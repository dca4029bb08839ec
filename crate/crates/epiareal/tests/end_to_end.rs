//! Whole-pipeline tests against the public API only: border list in,
//! fitted model, decomposition, and forecast out.

use approx::{assert_abs_diff_eq, assert_relative_eq};
use chrono::NaiveDate;
use epiareal::{
    build_adjacency, build_weights, decompose, fit, fit_summary, mean, neighbor_order,
    one_step_ahead, simulate, CountPanel, FitOptions, FitResult, ModelSpec, Overdispersion,
    Params, Psi, RegionCovariates, RegionSet, SimOptions, WeightMatrix, WithinTerms,
};

fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

/// A ring of `r` regions, each bordering its two neighbours.
fn ring_world(r: usize) -> (RegionSet, WeightMatrix, RegionCovariates) {
    let ids: Vec<String> = (0..r).map(|i| format!("R{i:02}")).collect();
    let regions = RegionSet::from_ids(&ids).unwrap();
    let borders: Vec<(String, String)> = (0..r)
        .map(|i| (ids[i].clone(), ids[(i + 1) % r].clone()))
        .collect();
    let adj = build_adjacency(&regions, &borders).unwrap();
    let weights = build_weights(&neighbor_order(&adj), 2, true);
    // Mildly uneven population shares that still sum to one.
    let raw: Vec<f64> = (0..r).map(|i| 1.0 + 0.35 * ((i * 7 % 5) as f64)).collect();
    let total: f64 = raw.iter().sum();
    let pop_share: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let over65: Vec<f64> = (0..r).map(|i| 0.18 + 0.01 * ((i % 4) as f64)).collect();
    let cov = RegionCovariates::new(pop_share, over65).unwrap();
    (regions, weights, cov)
}

fn three_component_spec() -> ModelSpec {
    ModelSpec {
        within: Some(WithinTerms {
            random_intercept: true,
        }),
        between: Some(epiareal::BetweenTerms {
            random_intercept: false,
            log_pop_share: false,
            use_counts: false,
        }),
        endemic: Some(epiareal::EndemicTerms {
            random_intercept: true,
            trend: true,
            trend_quadratic: false,
            log_over65: false,
        }),
        overdispersion: Overdispersion::Shared,
    }
}

fn generator_params(r: usize, spec: &ModelSpec) -> Params {
    let mut params = Params::zeros(spec, r);
    params.alpha_lambda = (0.25f64).ln();
    // Small fixed deviations standing in for random-intercept draws.
    for i in 0..r {
        params.b_lambda[i] = 0.3 * (((i * 13 % 7) as f64 - 3.0) / 3.0);
        params.b_nu[i] = 0.4 * (((i * 5 % 9) as f64 - 4.0) / 4.0);
    }
    params.sigma2_lambda = 0.1;
    params.sigma2_nu = 0.2;
    params.alpha_phi = (0.05f64).ln();
    params.alpha_nu = (60.0f64).ln();
    params.beta_nu_t = 0.01;
    params.psi = Psi::Shared(0.08);
    params
}

#[test]
fn pipeline_from_borders_to_forecast_and_decomposition() {
    let r = 8;
    let (regions, weights, cov) = ring_world(r);
    let spec = three_component_spec();
    let truth = generator_params(r, &spec);

    let opts = SimOptions::new(40, vec![5; r], 20260214, date("2020-02-24"));
    let panel = simulate(&truth, &spec, &regions, &cov, &weights, &opts).unwrap();
    assert_eq!(panel.n_regions(), r);
    assert_eq!(panel.n_days(), 40);

    let result = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
    assert!(result.converged, "fit did not converge: {result:?}");
    assert!(result.loglik.is_finite());
    assert_eq!(result.n_obs, r * 39);

    // The summary must show every requested block.
    let table = fit_summary(&result, &regions);
    assert!(table.contains("sigma2_lambda"), "{table}");
    assert!(table.contains("sigma2_nu"), "{table}");
    assert!(table.contains("overdispersion psi"), "{table}");

    // Decomposition: every region's shares sum to one.
    let d = decompose(&result.params, &spec, &panel, &cov, &weights).unwrap();
    for i in 0..r {
        let s = d.within[i] + d.between[i] + d.endemic[i];
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        assert!(d.within[i] >= 0.0 && d.between[i] >= 0.0 && d.endemic[i] >= 0.0);
    }

    // Forecast: proper intervals around a finite mean.
    let fc = one_step_ahead(&result.params, &spec, &panel, &cov, &weights, 0.8).unwrap();
    assert_eq!(fc.date, date("2020-02-24") + chrono::Days::new(40));
    for i in 0..r {
        assert!(fc.mean[i].is_finite() && fc.mean[i] >= 0.0);
        assert!(fc.lo[i] <= fc.hi[i]);
        assert!(
            (fc.lo[i] as f64) <= fc.mean[i].ceil() && fc.mean[i].floor() <= fc.hi[i] as f64,
            "interval [{}, {}] does not bracket the mean {}",
            fc.lo[i],
            fc.hi[i],
            fc.mean[i]
        );
    }
}

#[test]
fn fitted_fixed_effects_recover_the_generator() {
    let r = 12;
    let (regions, weights, cov) = ring_world(r);
    let spec = ModelSpec {
        within: Some(WithinTerms {
            random_intercept: false,
        }),
        between: None,
        endemic: Some(epiareal::EndemicTerms {
            random_intercept: false,
            trend: true,
            trend_quadratic: false,
            log_over65: false,
        }),
        overdispersion: Overdispersion::Shared,
    };
    let mut truth = Params::zeros(&spec, r);
    truth.alpha_lambda = (0.3f64).ln();
    truth.alpha_nu = (110.0f64).ln();
    truth.beta_nu_t = 0.015;
    truth.psi = Psi::Shared(0.1);

    let opts = SimOptions::new(60, vec![8; r], 7, date("2020-03-01"));
    let panel = simulate(&truth, &spec, &regions, &cov, &weights, &opts).unwrap();
    let result = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
    assert!(result.converged);

    let by_name = |name: &str| -> (f64, f64) {
        let fe = result
            .fixed_effects
            .iter()
            .find(|f| f.name == name)
            .unwrap_or_else(|| panic!("missing fixed effect {name}"));
        (fe.estimate, fe.se.expect("missing standard error"))
    };
    for (name, truth_value) in [
        ("alpha_lambda", truth.alpha_lambda),
        ("alpha_nu", truth.alpha_nu),
        ("beta_nu_t", truth.beta_nu_t),
        ("log_psi", 0.1f64.ln()),
    ] {
        let (est, se) = by_name(name);
        assert!(
            (est - truth_value).abs() <= 3.5 * se,
            "{name}: estimate {est:.4} vs truth {truth_value:.4} (se {se:.4})"
        );
    }
}

#[test]
fn fits_are_invariant_to_weight_rescaling() {
    let r = 6;
    let (regions, weights, cov) = ring_world(r);
    let spec = ModelSpec {
        within: Some(WithinTerms {
            random_intercept: false,
        }),
        between: Some(epiareal::BetweenTerms {
            random_intercept: false,
            log_pop_share: false,
            use_counts: false,
        }),
        endemic: Some(epiareal::EndemicTerms {
            random_intercept: false,
            trend: false,
            trend_quadratic: false,
            log_over65: false,
        }),
        overdispersion: Overdispersion::None,
    };
    let mut truth = Params::zeros(&spec, r);
    truth.alpha_lambda = (0.2f64).ln();
    // The neighbor feed is per-capita, so a population-scale multiplier
    // keeps the chain subcritical (between share about 0.15).
    truth.alpha_phi = (0.025f64).ln();
    truth.alpha_nu = (40.0f64).ln();

    let opts = SimOptions::new(30, vec![6; r], 99, date("2021-01-01"));
    let panel = simulate(&truth, &spec, &regions, &cov, &weights, &opts).unwrap();

    let base = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
    let scaled = fit(&spec, &panel, &cov, &weights.scaled(4.0), &FitOptions::default()).unwrap();
    assert!(base.converged && scaled.converged);

    // Rescaling the weight matrix by c only shifts alpha_phi by -ln c; the
    // likelihood and all other coefficients are unchanged.
    assert_relative_eq!(base.loglik, scaled.loglik, epsilon = 1e-7);
    assert_abs_diff_eq!(
        scaled.params.alpha_phi,
        base.params.alpha_phi - 4.0f64.ln(),
        epsilon = 1e-5
    );
    assert_abs_diff_eq!(
        scaled.params.alpha_lambda,
        base.params.alpha_lambda,
        epsilon = 1e-5
    );
    assert_abs_diff_eq!(scaled.params.alpha_nu, base.params.alpha_nu, epsilon = 1e-5);
}

#[test]
fn fits_are_invariant_to_date_translation() {
    let r = 5;
    let (regions, weights, cov) = ring_world(r);
    let spec = three_component_spec();
    let truth = generator_params(r, &spec);

    let opts = SimOptions::new(25, vec![4; r], 12345, date("2020-06-01"));
    let panel = simulate(&truth, &spec, &regions, &cov, &weights, &opts).unwrap();

    // Same counts, dates moved three years into the future.
    let shifted_dates: Vec<NaiveDate> = panel
        .dates()
        .iter()
        .map(|d| *d + chrono::Days::new(1096))
        .collect();
    let shifted = CountPanel::new(shifted_dates, panel.counts().to_vec(), r).unwrap();

    let a = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
    let b = fit(&spec, &shifted, &cov, &weights, &FitOptions::default()).unwrap();
    // Day indices are positional, so the calendar offset changes nothing.
    assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
    assert_eq!(a.params.alpha_nu.to_bits(), b.params.alpha_nu.to_bits());
    assert_eq!(a.params.beta_nu_t.to_bits(), b.params.beta_nu_t.to_bits());
}

#[test]
fn forecast_agrees_with_the_in_sample_mean_on_the_last_day() {
    let r = 7;
    let (regions, weights, cov) = ring_world(r);
    let spec = three_component_spec();
    let params = generator_params(r, &spec);

    let opts = SimOptions::new(30, vec![5; r], 4242, date("2020-04-01"));
    let panel = simulate(&params, &spec, &regions, &cov, &weights, &opts).unwrap();

    // Forecasting day T from the first T-1 days must reproduce the fitted
    // mean of day T on the full panel: both condition on the same lags.
    let history = panel.truncate_days(29).unwrap();
    let fc = one_step_ahead(&params, &spec, &history, &cov, &weights, 0.8).unwrap();
    let means = mean(&params, &spec, &panel, &cov, &weights).unwrap();
    for i in 0..r {
        assert_relative_eq!(fc.mean[i], means.total(i, 30), epsilon = 1e-12);
    }
    assert_eq!(fc.date, *panel.dates().last().unwrap());
}

#[test]
fn saved_fits_round_trip_through_json() {
    let r = 4;
    let (_, weights, cov) = ring_world(r);
    let spec = three_component_spec();
    let truth = generator_params(r, &spec);
    let (regions, _, _) = ring_world(r);
    let opts = SimOptions::new(15, vec![3; r], 5150, date("2020-05-05"));
    let panel = simulate(&truth, &spec, &regions, &cov, &weights, &opts).unwrap();
    let result = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();

    let json = serde_json::to_string_pretty(&result).unwrap();
    let back: FitResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back.spec, result.spec);
    assert_eq!(back.params.alpha_nu.to_bits(), result.params.alpha_nu.to_bits());
    assert_eq!(back.params.b_nu, result.params.b_nu);
    assert_eq!(back.converged, result.converged);
    assert_eq!(back.fixed_effects.len(), result.fixed_effects.len());

    // The restored parameters reproduce the stored likelihood exactly.
    let ll = epiareal::panel_loglik(&back.params, &back.spec, &panel, &cov, &weights).unwrap();
    assert_eq!(ll.to_bits(), result.loglik.to_bits());
}
