//! One-step-ahead forecasts, mean decompositions, and simulation.
//!
//! Forecasts are plug-in: the day `T + 1` mean is evaluated at the supplied
//! parameters and the prediction interval takes count quantiles from the
//! same negative binomial observation model.  Parameter uncertainty is not
//! propagated, which is the usual choice for short-horizon count
//! surveillance and is what the interval-coverage checks below exercise.

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{CountPanel, RegionCovariates};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions};
use crate::graph::{RegionSet, WeightMatrix};
use crate::model::{mean, predictors, ModelSpec, Params};

/// Hard cap on the quantile scan length.
const QUANTILE_SCAN_CAP: u64 = 20_000_000;

/// Largest probability the quantile scan resolves; higher requests clamp.
const MAX_QUANTILE_P: f64 = 1.0 - 1e-12;

/// Smallest-`y` count with `P(Y <= y) >= p` under the negative binomial
/// with mean `mu` and overdispersion `psi` (`psi = 0` is Poisson).
///
/// `p` must lie in `(0, 1]`; values above `1 - 1e-12` are clamped to it.
/// A zero mean puts all mass on zero.  Means so large that the scan would
/// exceed an internal cap give [`Error::QuantileOverflow`].
pub fn nb_quantile(p: f64, mu: f64, psi: f64) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::NonFiniteInput(format!(
            "quantile level must be in (0, 1], got {p}"
        )));
    }
    if !mu.is_finite() || mu < 0.0 || !psi.is_finite() || psi < 0.0 {
        return Err(Error::NonFiniteInput(format!(
            "nb_quantile(mu = {mu}, psi = {psi})"
        )));
    }
    let p = p.min(MAX_QUANTILE_P);
    if mu == 0.0 {
        return Ok(0);
    }
    // Log-space pmf recurrence keeps the scan stable for any mean: the
    // underflowed far-left tail contributes nothing it should not.
    let (mut logp, ratio): (f64, Box<dyn Fn(f64) -> f64>) = if psi == 0.0 {
        (-mu, Box::new(move |y: f64| mu / (y + 1.0)))
    } else {
        let k = 1.0 / psi;
        let odds = psi * mu / (1.0 + psi * mu);
        (
            -k * (psi * mu).ln_1p(),
            Box::new(move |y: f64| (y + k) / (y + 1.0) * odds),
        )
    };
    let mut cdf = logp.exp();
    let mut y = 0u64;
    while cdf < p {
        if y >= QUANTILE_SCAN_CAP {
            return Err(Error::QuantileOverflow {
                mu,
                cap: QUANTILE_SCAN_CAP,
            });
        }
        logp += ratio(y as f64).ln();
        y += 1;
        cdf += logp.exp();
    }
    Ok(y)
}

/// One-step-ahead forecast for every region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forecast {
    /// Day being forecast: the day after the panel's last date.
    pub date: NaiveDate,
    /// Central interval coverage level, e.g. `0.8`.
    pub level: f64,
    /// Plug-in means, in region order.
    pub mean: Vec<f64>,
    /// Lower interval endpoints (counts).
    pub lo: Vec<u64>,
    /// Upper interval endpoints (counts).
    pub hi: Vec<u64>,
}

/// Forecast day `T + 1` from the panel's last day.
///
/// The interval is the central `level` interval of the fitted count
/// distribution: endpoints at the `(1 - level) / 2` and `(1 + level) / 2`
/// quantiles.
pub fn one_step_ahead(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
    level: f64,
) -> Result<Forecast> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::NonFiniteInput(format!(
            "interval level must be in (0, 1), got {level}"
        )));
    }
    let r = panel.n_regions();
    params.validate(spec, r)?;
    if cov.len() != r || weights.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "panel has {r} regions, covariates have {} and weights {}",
            cov.len(),
            weights.len()
        )));
    }
    let t_next = panel.n_days() + 1; // 1-based day index being forecast
    let pred = predictors(params, spec, cov, t_next)?;
    let last = panel.n_days() - 1;
    let use_counts = spec.between.map_or(false, |b| b.use_counts);
    let mut mu = vec![0.0; r];
    let mut lo = vec![0u64; r];
    let mut hi = vec![0u64; r];
    for i in 0..r {
        let mut m = pred.lambda[i] * panel.count(i, last) as f64;
        if spec.between.is_some() {
            let mut s = 0.0;
            for (j, w) in weights.into_row(i).iter().enumerate() {
                if *w > 0.0 {
                    let q = if use_counts {
                        panel.count(j, last) as f64
                    } else {
                        panel.count(j, last) as f64 / cov.pop_share[j]
                    };
                    s += w * q;
                }
            }
            m += pred.phi[i] * s;
        }
        m += cov.pop_share[i] * pred.nu[i];
        if !m.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "forecast mean for region index {i} is {m}"
            )));
        }
        let psi = params.psi.for_region(i);
        mu[i] = m;
        lo[i] = nb_quantile((1.0 - level) / 2.0, m, psi)?;
        hi[i] = nb_quantile((1.0 + level) / 2.0, m, psi)?;
    }
    Ok(Forecast {
        date: panel
            .last_date()
            .checked_add_days(Days::new(1))
            .expect("date range"),
        level,
        mean: mu,
        lo,
        hi,
    })
}

/// Average share of each mean component, per region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    pub within: Vec<f64>,
    pub between: Vec<f64>,
    pub endemic: Vec<f64>,
}

/// Decompose fitted means into within / between / endemic shares.
///
/// Every modelled day contributes its share triple with equal weight;
/// days where a region's fitted mean is zero are skipped for that region.
/// A region whose mean is zero on every day gets an all-zero row (there is
/// nothing to attribute).
pub fn decompose(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<Decomposition> {
    let means = mean(params, spec, panel, cov, weights)?;
    let r = panel.n_regions();
    let t_days = panel.n_days();
    let mut within = vec![0.0; r];
    let mut between = vec![0.0; r];
    let mut endemic = vec![0.0; r];
    for i in 0..r {
        let mut used = 0usize;
        for t in 2..=t_days {
            let total = means.total(i, t);
            if total > 0.0 {
                within[i] += means.within(i, t) / total;
                between[i] += means.between(i, t) / total;
                endemic[i] += means.endemic(i, t) / total;
                used += 1;
            }
        }
        if used > 0 {
            let w = used as f64;
            within[i] /= w;
            between[i] /= w;
            endemic[i] /= w;
        }
    }
    Ok(Decomposition {
        within,
        between,
        endemic,
    })
}

/// Controls for [`simulate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOptions {
    /// Panel length in days, including the seeded first day.
    pub days: usize,
    /// First-day counts, one per region.
    pub y0: Vec<u64>,
    /// Master RNG seed.
    pub seed: u64,
    /// Date of the first day.
    pub start_date: NaiveDate,
    /// Largest mean tolerated before the run aborts with
    /// [`Error::ExplosionGuard`].
    pub mu_cap: f64,
}

impl SimOptions {
    pub fn new(days: usize, y0: Vec<u64>, seed: u64, start_date: NaiveDate) -> Self {
        SimOptions {
            days,
            y0,
            seed,
            start_date,
            mu_cap: 1e9,
        }
    }
}

/// SplitMix64 step, used to derive independent stream seeds.
pub(crate) fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw one negative binomial count as a Gamma-mixed Poisson.
fn sample_count(rng: &mut ChaCha8Rng, mu: f64, psi: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let rate = if psi == 0.0 {
        mu
    } else {
        let shape = 1.0 / psi;
        let g: f64 = Gamma::new(shape, psi).expect("valid gamma").sample(rng);
        mu * g
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u64
}

/// Simulate a count panel forward from a seeded first day.
///
/// Counts are drawn day by day in region order from the fitted observation
/// model, so a run is fully determined by the seed.  A mean above
/// `opts.mu_cap` aborts with [`Error::ExplosionGuard`] naming the region and
/// 1-based day.
pub fn simulate(
    params: &Params,
    spec: &ModelSpec,
    regions: &RegionSet,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
    opts: &SimOptions,
) -> Result<CountPanel> {
    let r = regions.len();
    params.validate(spec, r)?;
    if cov.len() != r || weights.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "region set has {r} regions, covariates have {} and weights {}",
            cov.len(),
            weights.len()
        )));
    }
    if opts.y0.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "first-day counts have {} entries for {r} regions",
            opts.y0.len()
        )));
    }
    if opts.days < 2 {
        return Err(Error::NonFiniteInput(format!(
            "a panel needs at least 2 days, requested {}",
            opts.days
        )));
    }
    if !(opts.mu_cap > 0.0) {
        return Err(Error::NonFiniteInput(format!(
            "mu_cap must be positive, got {}",
            opts.mu_cap
        )));
    }
    let use_counts = spec.between.map_or(false, |b| b.use_counts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut counts = vec![0u64; r * opts.days];
    for (i, y) in opts.y0.iter().enumerate() {
        counts[i * opts.days] = *y;
    }
    for t in 2..=opts.days {
        let pred = predictors(params, spec, cov, t)?;
        // Lagged incidence of every region, for the between term.
        let mut lagged = vec![0.0; r];
        for j in 0..r {
            let y_prev = counts[j * opts.days + (t - 2)] as f64;
            lagged[j] = if use_counts {
                y_prev
            } else {
                y_prev / cov.pop_share[j]
            };
        }
        for i in 0..r {
            let y_prev = counts[i * opts.days + (t - 2)] as f64;
            let mut mu = pred.lambda[i] * y_prev + cov.pop_share[i] * pred.nu[i];
            if spec.between.is_some() {
                let mut s = 0.0;
                for (j, w) in weights.into_row(i).iter().enumerate() {
                    if *w > 0.0 {
                        s += w * lagged[j];
                    }
                }
                mu += pred.phi[i] * s;
            }
            if !mu.is_finite() || mu > opts.mu_cap {
                return Err(Error::ExplosionGuard {
                    region: regions.id(i).to_string(),
                    day: t,
                    mu,
                    cap: opts.mu_cap,
                });
            }
            counts[i * opts.days + (t - 1)] =
                sample_count(&mut rng, mu, params.psi.for_region(i));
        }
    }
    let dates: Vec<NaiveDate> = (0..opts.days)
        .map(|d| {
            opts.start_date
                .checked_add_days(Days::new(d as u64))
                .expect("date range")
        })
        .collect();
    CountPanel::new(dates, counts, r)
}

/// Controls for [`interval_coverage`].
#[derive(Debug, Clone)]
pub struct CoverageOptions {
    /// Interval level to check, e.g. `0.8`.
    pub level: f64,
    /// Simulated panel length; the last day is held out and forecast.
    pub days: usize,
    /// First-day counts for each replicate.
    pub y0: Vec<u64>,
    /// Replicates.
    pub n_reps: usize,
    /// Master seed; each replicate gets a derived stream.
    pub seed: u64,
    /// Refit the model on each simulated history before forecasting; `None`
    /// forecasts from the data-generating parameters (pure interval check).
    pub refit: Option<FitOptions>,
    /// Simulation explosion cap.
    pub mu_cap: f64,
}

impl CoverageOptions {
    pub fn new(days: usize, y0: Vec<u64>, n_reps: usize, seed: u64) -> Self {
        CoverageOptions {
            level: 0.8,
            days,
            y0,
            n_reps,
            seed,
            refit: None,
            mu_cap: 1e9,
        }
    }
}

/// Result of [`interval_coverage`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageResult {
    /// Fraction of held-out counts inside their interval.
    pub coverage: f64,
    /// Covered cells.
    pub hits: usize,
    /// Evaluated cells: replicates times regions.
    pub cells: usize,
    pub level: f64,
}

/// Empirical coverage of one-step-ahead intervals under the model itself.
///
/// Each replicate simulates `days` days from `params`, forecasts the last
/// day from the preceding history, and scores whether the simulated count
/// fell inside the interval.
pub fn interval_coverage(
    params: &Params,
    spec: &ModelSpec,
    regions: &RegionSet,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
    opts: &CoverageOptions,
) -> Result<CoverageResult> {
    if opts.n_reps == 0 {
        return Err(Error::NonFiniteInput("n_reps must be at least 1".to_string()));
    }
    if opts.days < 3 {
        return Err(Error::NonFiniteInput(
            "coverage needs at least 3 days: 2 for history, 1 held out".to_string(),
        ));
    }
    let r = regions.len();
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date");
    let mut hits = 0usize;
    let mut cells = 0usize;
    for rep in 0..opts.n_reps {
        let sim_opts = SimOptions {
            days: opts.days,
            y0: opts.y0.clone(),
            seed: mix_seed(opts.seed, rep as u64),
            start_date: start,
            mu_cap: opts.mu_cap,
        };
        let sim = simulate(params, spec, regions, cov, weights, &sim_opts)?;
        let history = sim.truncate_days(opts.days - 1)?;
        let source = match &opts.refit {
            Some(fit_opts) => fit(spec, &history, cov, weights, fit_opts)?.params,
            None => params.clone(),
        };
        let fc = one_step_ahead(&source, spec, &history, cov, weights, opts.level)?;
        for i in 0..r {
            let y = sim.count(i, opts.days - 1);
            if fc.lo[i] <= y && y <= fc.hi[i] {
                hits += 1;
            }
            cells += 1;
        }
    }
    Ok(CoverageResult {
        coverage: hits as f64 / cells as f64,
        hits,
        cells,
        level: opts.level,
    })
}
