//! Model specification, parameters, and the three-component mean.
//!
//! The conditional mean of the count for region `r` on day `t` (days are
//! numbered 1..T) decomposes into three nonnegative parts:
//!
//! ```text
//! mu[r][t] = lambda_r * Y[r][t-1]                      (within-region)
//!          + phi_r * sum_s w[s->r] * Q[s][t-1]         (between-region)
//!          + e_r * nu[r][t]                            (endemic)
//! ```
//!
//! with log-linear multipliers
//!
//! ```text
//! log lambda_r  = alpha_lambda + b_lambda[r]
//! log phi_r     = alpha_phi    + b_phi[r] + beta_phi_pop * log e_r
//! log nu[r][t]  = alpha_nu     + b_nu[r]  + beta_nu_t * t + beta_nu_t2 * t^2
//!                 + beta_nu_age * log a_r
//! ```
//!
//! `Q` is per-capita incidence (or raw counts when the between component is
//! configured that way), `e_r` the population share, `a_r` the elderly
//! proportion.  Random intercepts `b` are mean-zero deviations with
//! per-component variances.  Counts are negative binomial with
//! `Var = mu (1 + psi mu)`; `psi = 0` recovers the Poisson exactly.

pub mod likelihood;

use serde::{Deserialize, Serialize};

use crate::data::{incidence, CountPanel, RegionCovariates};
use crate::error::{Error, Result};
use crate::graph::WeightMatrix;

/// Terms of the within-region (autoregressive) component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithinTerms {
    /// Region-level random intercept on `log lambda`.
    #[serde(default)]
    pub random_intercept: bool,
}

/// Terms of the between-region (neighborhood) component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetweenTerms {
    #[serde(default)]
    pub random_intercept: bool,
    /// Include `beta_phi_pop * log e_r` in `log phi`.
    #[serde(default)]
    pub log_pop_share: bool,
    /// Drive the neighbor sum by raw counts instead of per-capita incidence.
    #[serde(default)]
    pub use_counts: bool,
}

/// Terms of the endemic component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndemicTerms {
    #[serde(default)]
    pub random_intercept: bool,
    /// Linear day trend `beta_nu_t * t`.
    #[serde(default)]
    pub trend: bool,
    /// Quadratic day trend `beta_nu_t2 * t^2`.
    #[serde(default)]
    pub trend_quadratic: bool,
    /// Elderly-share effect `beta_nu_age * log a_r`.
    #[serde(default)]
    pub log_over65: bool,
}

/// Overdispersion structure of the count distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Overdispersion {
    /// Poisson counts (`psi = 0`).
    None,
    /// One `psi > 0` shared by all regions.
    #[default]
    Shared,
    /// A separate `psi_r` per region.
    PerRegion,
}

/// Which components and terms are active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within: Option<WithinTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub between: Option<BetweenTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endemic: Option<EndemicTerms>,
    #[serde(default)]
    pub overdispersion: Overdispersion,
}

impl Default for ModelSpec {
    /// The flagship specification: all three components with random
    /// intercepts, population-share effect on the between component, linear
    /// and quadratic day trends plus elderly-share effect on the endemic
    /// component, shared overdispersion.
    fn default() -> Self {
        Self {
            within: Some(WithinTerms {
                random_intercept: true,
            }),
            between: Some(BetweenTerms {
                random_intercept: true,
                log_pop_share: true,
                use_counts: false,
            }),
            endemic: Some(EndemicTerms {
                random_intercept: true,
                trend: true,
                trend_quadratic: true,
                log_over65: true,
            }),
            overdispersion: Overdispersion::Shared,
        }
    }
}

impl ModelSpec {
    /// A spec must keep at least one mean component.
    pub fn validate(&self) -> Result<()> {
        if self.within.is_none() && self.between.is_none() && self.endemic.is_none() {
            return Err(Error::DimensionMismatch(
                "model spec enables no mean component".into(),
            ));
        }
        Ok(())
    }

    /// True when no term anywhere carries a random intercept.
    pub fn is_fixed_effects_only(&self) -> bool {
        !self.within.map_or(false, |w| w.random_intercept)
            && !self.between.map_or(false, |b| b.random_intercept)
            && !self.endemic.map_or(false, |e| e.random_intercept)
    }

    pub fn has_random_intercept(&self, comp: Component) -> bool {
        match comp {
            Component::Within => self.within.map_or(false, |w| w.random_intercept),
            Component::Between => self.between.map_or(false, |b| b.random_intercept),
            Component::Endemic => self.endemic.map_or(false, |e| e.random_intercept),
        }
    }
}

/// The three mean components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Within,
    Between,
    Endemic,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Within, Component::Between, Component::Endemic];

    pub fn index(self) -> usize {
        match self {
            Component::Within => 0,
            Component::Between => 1,
            Component::Endemic => 2,
        }
    }

    /// Greek-letter tag used in parameter names and reports.
    pub fn tag(self) -> &'static str {
        match self {
            Component::Within => "lambda",
            Component::Between => "phi",
            Component::Endemic => "nu",
        }
    }
}

/// Overdispersion parameters on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psi {
    /// One shared `psi >= 0`.
    Shared(f64),
    /// Per-region `psi_r >= 0`.
    PerRegion(Vec<f64>),
    /// Poisson counts.
    None,
}

impl Psi {
    /// Overdispersion for a region (0 for the Poisson case).
    pub fn for_region(&self, r: usize) -> f64 {
        match self {
            Psi::None => 0.0,
            Psi::Shared(v) => *v,
            Psi::PerRegion(vs) => vs[r],
        }
    }
}

/// Full parameter vector.  Fields for disabled terms are carried as zeros so
/// the struct shape does not depend on the spec; the spec decides which
/// fields the likelihood, gradient, and optimizer actually read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub alpha_lambda: f64,
    pub b_lambda: Vec<f64>,
    pub alpha_phi: f64,
    pub b_phi: Vec<f64>,
    pub beta_phi_pop: f64,
    pub alpha_nu: f64,
    pub b_nu: Vec<f64>,
    pub beta_nu_t: f64,
    pub beta_nu_t2: f64,
    pub beta_nu_age: f64,
    pub sigma2_lambda: f64,
    pub sigma2_phi: f64,
    pub sigma2_nu: f64,
    pub psi: Psi,
}

impl Params {
    /// All-zero parameters (multipliers 1) with unit variances and
    /// overdispersion init matching the spec (`psi = 1` where enabled).
    pub fn zeros(spec: &ModelSpec, n_regions: usize) -> Params {
        Params {
            alpha_lambda: 0.0,
            b_lambda: vec![0.0; n_regions],
            alpha_phi: 0.0,
            b_phi: vec![0.0; n_regions],
            beta_phi_pop: 0.0,
            alpha_nu: 0.0,
            b_nu: vec![0.0; n_regions],
            beta_nu_t: 0.0,
            beta_nu_t2: 0.0,
            beta_nu_age: 0.0,
            sigma2_lambda: 1.0,
            sigma2_phi: 1.0,
            sigma2_nu: 1.0,
            psi: match spec.overdispersion {
                Overdispersion::None => Psi::None,
                Overdispersion::Shared => Psi::Shared(1.0),
                Overdispersion::PerRegion => Psi::PerRegion(vec![1.0; n_regions]),
            },
        }
    }

    pub fn n_regions(&self) -> usize {
        self.b_lambda.len()
    }

    pub fn sigma2(&self, comp: Component) -> f64 {
        match comp {
            Component::Within => self.sigma2_lambda,
            Component::Between => self.sigma2_phi,
            Component::Endemic => self.sigma2_nu,
        }
    }

    pub fn sigma2_mut(&mut self, comp: Component) -> &mut f64 {
        match comp {
            Component::Within => &mut self.sigma2_lambda,
            Component::Between => &mut self.sigma2_phi,
            Component::Endemic => &mut self.sigma2_nu,
        }
    }

    pub fn deviations(&self, comp: Component) -> &[f64] {
        match comp {
            Component::Within => &self.b_lambda,
            Component::Between => &self.b_phi,
            Component::Endemic => &self.b_nu,
        }
    }

    pub fn deviations_mut(&mut self, comp: Component) -> &mut Vec<f64> {
        match comp {
            Component::Within => &mut self.b_lambda,
            Component::Between => &mut self.b_phi,
            Component::Endemic => &mut self.b_nu,
        }
    }

    /// Check every field the spec reads for finiteness and domain.
    pub fn validate(&self, spec: &ModelSpec, n_regions: usize) -> Result<()> {
        let check = |v: f64, what: &str| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFiniteInput(format!("{what} = {v}")))
            }
        };
        for (vec, what) in [
            (&self.b_lambda, "b_lambda"),
            (&self.b_phi, "b_phi"),
            (&self.b_nu, "b_nu"),
        ] {
            if vec.len() != n_regions {
                return Err(Error::DimensionMismatch(format!(
                    "{what} has {} entries, expected {n_regions}",
                    vec.len()
                )));
            }
            for (i, &v) in vec.iter().enumerate() {
                check(v, &format!("{what}[{i}]"))?;
            }
        }
        check(self.alpha_lambda, "alpha_lambda")?;
        check(self.alpha_phi, "alpha_phi")?;
        check(self.beta_phi_pop, "beta_phi_pop")?;
        check(self.alpha_nu, "alpha_nu")?;
        check(self.beta_nu_t, "beta_nu_t")?;
        check(self.beta_nu_t2, "beta_nu_t2")?;
        check(self.beta_nu_age, "beta_nu_age")?;
        match (&spec.overdispersion, &self.psi) {
            (Overdispersion::None, _) => {}
            (Overdispersion::Shared, Psi::Shared(v)) => {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::NonFiniteInput(format!("psi = {v} must be >= 0")));
                }
            }
            (Overdispersion::PerRegion, Psi::PerRegion(vs)) => {
                if vs.len() != n_regions {
                    return Err(Error::DimensionMismatch(format!(
                        "psi has {} entries, expected {n_regions}",
                        vs.len()
                    )));
                }
                for (i, &v) in vs.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::NonFiniteInput(format!(
                            "psi[{i}] = {v} must be >= 0"
                        )));
                    }
                }
            }
            (od, psi) => {
                return Err(Error::DimensionMismatch(format!(
                    "overdispersion spec {od:?} does not match psi parameter {psi:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-region multipliers of the three components on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictors {
    /// `lambda_r` (zeros when the within component is disabled).
    pub lambda: Vec<f64>,
    /// `phi_r` (zeros when the between component is disabled).
    pub phi: Vec<f64>,
    /// `nu[r][t]` for the requested day (zeros when endemic is disabled).
    pub nu: Vec<f64>,
}

/// Evaluate the log-linear predictors for day `t` (1-based).
pub fn predictors(
    params: &Params,
    spec: &ModelSpec,
    cov: &RegionCovariates,
    t: usize,
) -> Result<Predictors> {
    spec.validate()?;
    let r = cov.len();
    params.validate(spec, r)?;
    if t < 1 {
        return Err(Error::DimensionMismatch("day index t starts at 1".into()));
    }
    let tf = t as f64;
    let mut lambda = vec![0.0; r];
    let mut phi = vec![0.0; r];
    let mut nu = vec![0.0; r];
    for i in 0..r {
        if let Some(w) = &spec.within {
            let b = if w.random_intercept {
                params.b_lambda[i]
            } else {
                0.0
            };
            lambda[i] = (params.alpha_lambda + b).exp();
        }
        if let Some(bt) = &spec.between {
            let mut eta = params.alpha_phi;
            if bt.random_intercept {
                eta += params.b_phi[i];
            }
            if bt.log_pop_share {
                eta += params.beta_phi_pop * cov.pop_share[i].ln();
            }
            phi[i] = eta.exp();
        }
        if let Some(en) = &spec.endemic {
            let mut eta = params.alpha_nu;
            if en.random_intercept {
                eta += params.b_nu[i];
            }
            if en.trend {
                eta += params.beta_nu_t * tf;
            }
            if en.trend_quadratic {
                eta += params.beta_nu_t2 * tf * tf;
            }
            if en.log_over65 {
                eta += params.beta_nu_age * cov.over65[i].ln();
            }
            nu[i] = eta.exp();
        }
    }
    Ok(Predictors { lambda, phi, nu })
}

/// Fitted mean split into its three parts for days `t = 2..T`.
///
/// `total` is stored as the literal floating-point sum
/// `within + between + endemic`, so additivity is exact by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMeans {
    r: usize,
    /// Number of modelled days (T - 1).
    t_modelled: usize,
    within: Vec<f64>,
    between: Vec<f64>,
    endemic: Vec<f64>,
    total: Vec<f64>,
}

impl ComponentMeans {
    pub fn n_regions(&self) -> usize {
        self.r
    }

    /// Modelled days are `t = 2..=T`; this is `T - 1`.
    pub fn n_days(&self) -> usize {
        self.t_modelled
    }

    fn cell(&self, r: usize, t: usize) -> usize {
        assert!(
            (2..=self.t_modelled + 1).contains(&t),
            "modelled days are 2..=T"
        );
        r * self.t_modelled + (t - 2)
    }

    /// Component values for region `r` on 1-based day `t` in `2..=T`.
    pub fn within(&self, r: usize, t: usize) -> f64 {
        self.within[self.cell(r, t)]
    }

    pub fn between(&self, r: usize, t: usize) -> f64 {
        self.between[self.cell(r, t)]
    }

    pub fn endemic(&self, r: usize, t: usize) -> f64 {
        self.endemic[self.cell(r, t)]
    }

    pub fn total(&self, r: usize, t: usize) -> f64 {
        self.total[self.cell(r, t)]
    }
}

/// Compute the three mean components over the panel's modelled days.
pub fn mean(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<ComponentMeans> {
    spec.validate()?;
    let r = panel.n_regions();
    if cov.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "panel has {r} regions, covariates have {}",
            cov.len()
        )));
    }
    if weights.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "panel has {r} regions, weight matrix has {}",
            weights.len()
        )));
    }
    params.validate(spec, r)?;

    let t_days = panel.n_days();
    let t_modelled = t_days - 1;
    let neighbor_sums = neighbor_sums(spec, panel, cov, weights)?;

    let mut within = vec![0.0; r * t_modelled];
    let mut between = vec![0.0; r * t_modelled];
    let mut endemic = vec![0.0; r * t_modelled];
    let mut total = vec![0.0; r * t_modelled];

    for t in 2..=t_days {
        let preds = predictors(params, spec, cov, t)?;
        for i in 0..r {
            let cell = i * t_modelled + (t - 2);
            let w = preds.lambda[i] * panel.count(i, t - 2) as f64;
            let b = preds.phi[i] * neighbor_sums[cell];
            let e = cov.pop_share[i] * preds.nu[i];
            within[cell] = w;
            between[cell] = b;
            endemic[cell] = e;
            total[cell] = w + b + e;
        }
    }
    Ok(ComponentMeans {
        r,
        t_modelled,
        within,
        between,
        endemic,
        total,
    })
}

/// Lagged neighbor sums `sum_s w[s->r] Q[s][t-1]` for modelled days,
/// row-major `[region][t-2]`.  Zeros when the between component is off.
pub(crate) fn neighbor_sums(
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<Vec<f64>> {
    let r = panel.n_regions();
    let t_modelled = panel.n_days() - 1;
    let mut sums = vec![0.0; r * t_modelled];
    let Some(between) = &spec.between else {
        return Ok(sums);
    };
    let q = if between.use_counts {
        None
    } else {
        Some(incidence(panel, cov)?)
    };
    for into in 0..r {
        let row = weights.into_row(into);
        for (from, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for t in 0..t_modelled {
                let lagged = match &q {
                    Some(q) => q.value(from, t),
                    None => panel.count(from, t) as f64,
                };
                sums[into * t_modelled + t] += w * lagged;
            }
        }
    }
    Ok(sums)
}
