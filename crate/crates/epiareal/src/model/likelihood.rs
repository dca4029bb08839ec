//! Count log-likelihoods, analytic scores, and information matrices.
//!
//! Counts are negative binomial with mean `mu` and variance
//! `mu (1 + psi mu)`; `psi = 0` is evaluated through an exact Poisson
//! branch, not as a limit.  The panel log-likelihood conditions on the first
//! day and sums days `t = 2..T` over all regions.
//!
//! When a mean collapses to zero against a positive count the log-likelihood
//! is `-inf`; we represent that by the finite guard value
//! [`GUARDED_LOGLIK`] so that line searches can reject such points without
//! NaN bookkeeping.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::data::{CountPanel, RegionCovariates};
use crate::error::{Error, Result};
use crate::graph::WeightMatrix;
use crate::model::{neighbor_sums, Component, ModelSpec, Overdispersion, Params, Psi};
use crate::special::{digamma_diff, ln_gamma_ratio, trigamma_diff};

/// Finite stand-in for a log-likelihood of `-inf`.
pub const GUARDED_LOGLIK: f64 = -1e300;

/// True when a log-likelihood value is the degenerate-mean guard.
pub fn is_loglik_guarded(value: f64) -> bool {
    value <= GUARDED_LOGLIK
}

/// Negative binomial log-pmf with mean/overdispersion parameterization.
///
/// Errors on non-finite inputs, `mu <= 0`, or `psi < 0`.
pub fn nb_loglik(y: u64, mu: f64, psi: f64) -> Result<f64> {
    if !mu.is_finite() || !psi.is_finite() {
        return Err(Error::NonFiniteInput(format!(
            "nb_loglik(mu = {mu}, psi = {psi})"
        )));
    }
    if mu <= 0.0 {
        return Err(Error::NonFiniteInput(format!("nb_loglik needs mu > 0, got {mu}")));
    }
    if psi < 0.0 {
        return Err(Error::NonFiniteInput(format!(
            "nb_loglik needs psi >= 0, got {psi}"
        )));
    }
    Ok(nb_logpmf_guarded(y, mu, psi))
}

/// Internal log-pmf tolerating `mu = 0` (certain zero) and overflowed means.
pub(crate) fn nb_logpmf_guarded(y: u64, mu: f64, psi: f64) -> f64 {
    if !mu.is_finite() || mu < 0.0 {
        return GUARDED_LOGLIK;
    }
    if mu == 0.0 {
        return if y == 0 { 0.0 } else { GUARDED_LOGLIK };
    }
    let yf = y as f64;
    if psi == 0.0 {
        // Exact Poisson branch.
        return if y == 0 {
            -mu
        } else {
            yf * mu.ln() - mu - ln_gamma(yf + 1.0)
        };
    }
    let k = 1.0 / psi;
    if y == 0 {
        return -k * (psi * mu).ln_1p();
    }
    ln_gamma_ratio(k, y) - ln_gamma(yf + 1.0) - k * (psi * mu).ln_1p()
        + yf * (mu / (k + mu)).ln()
}

/// First and second derivatives of the log-pmf with respect to `log psi`.
/// Requires `psi > 0` and `mu >= 0` finite.
fn dlogpmf_dlogpsi(y: u64, mu: f64, psi: f64) -> (f64, f64) {
    let k = 1.0 / psi;
    let yf = y as f64;
    let km = k + mu;
    let dk = digamma_diff(k, y) + (k / km).ln() + 1.0 - (k + yf) / km;
    let dkk = trigamma_diff(k, y) + 1.0 / k - 2.0 / km + (k + yf) / (km * km);
    let first = -k * dk;
    let second = k * dk + k * k * dkk;
    (first, second)
}

/// Mapping between the free parameter vector seen by the optimizer and the
/// [`Params`] struct, given a spec, a region count, and (internally) a set
/// of components whose deviations are frozen at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    n_regions: usize,
    alpha_lambda: Option<usize>,
    b_lambda: Option<usize>,
    alpha_phi: Option<usize>,
    b_phi: Option<usize>,
    beta_phi_pop: Option<usize>,
    alpha_nu: Option<usize>,
    b_nu: Option<usize>,
    beta_nu_t: Option<usize>,
    beta_nu_t2: Option<usize>,
    beta_nu_age: Option<usize>,
    log_psi: Option<usize>,
    psi_per_region: bool,
    len: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, n_regions: usize) -> ParamLayout {
        Self::with_frozen(spec, n_regions, [false; 3])
    }

    /// Layout that omits the deviation blocks of frozen components.
    pub(crate) fn with_frozen(
        spec: &ModelSpec,
        n_regions: usize,
        frozen: [bool; 3],
    ) -> ParamLayout {
        let mut next = 0usize;
        let mut take = |on: bool, width: usize| -> Option<usize> {
            if on {
                let at = next;
                next += width;
                Some(at)
            } else {
                None
            }
        };
        let within = spec.within;
        let between = spec.between;
        let endemic = spec.endemic;
        let alpha_lambda = take(within.is_some(), 1);
        let b_lambda = take(
            within.map_or(false, |w| w.random_intercept) && !frozen[0],
            n_regions,
        );
        let alpha_phi = take(between.is_some(), 1);
        let b_phi = take(
            between.map_or(false, |b| b.random_intercept) && !frozen[1],
            n_regions,
        );
        let beta_phi_pop = take(between.map_or(false, |b| b.log_pop_share), 1);
        let alpha_nu = take(endemic.is_some(), 1);
        let b_nu = take(
            endemic.map_or(false, |e| e.random_intercept) && !frozen[2],
            n_regions,
        );
        let beta_nu_t = take(endemic.map_or(false, |e| e.trend), 1);
        let beta_nu_t2 = take(endemic.map_or(false, |e| e.trend_quadratic), 1);
        let beta_nu_age = take(endemic.map_or(false, |e| e.log_over65), 1);
        let (log_psi, psi_per_region) = match spec.overdispersion {
            Overdispersion::None => (None, false),
            Overdispersion::Shared => (take(true, 1), false),
            Overdispersion::PerRegion => (take(true, n_regions), true),
        };
        ParamLayout {
            n_regions,
            alpha_lambda,
            b_lambda,
            alpha_phi,
            b_phi,
            beta_phi_pop,
            alpha_nu,
            b_nu,
            beta_nu_t,
            beta_nu_t2,
            beta_nu_age,
            log_psi,
            psi_per_region,
            len: next,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot names in vector order (deviations as `b_lambda[3]`, overdispersion
    /// on the log scale as `log_psi`).
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.len];
        let mut put = |at: Option<usize>, name: &str| {
            if let Some(i) = at {
                names[i] = name.to_string();
            }
        };
        put(self.alpha_lambda, "alpha_lambda");
        put(self.alpha_phi, "alpha_phi");
        put(self.beta_phi_pop, "beta_phi_pop");
        put(self.alpha_nu, "alpha_nu");
        put(self.beta_nu_t, "beta_nu_t");
        put(self.beta_nu_t2, "beta_nu_t2");
        put(self.beta_nu_age, "beta_nu_age");
        for (start, tag) in [
            (self.b_lambda, "b_lambda"),
            (self.b_phi, "b_phi"),
            (self.b_nu, "b_nu"),
        ] {
            if let Some(s) = start {
                for r in 0..self.n_regions {
                    names[s + r] = format!("{tag}[{r}]");
                }
            }
        }
        if let Some(s) = self.log_psi {
            if self.psi_per_region {
                for r in 0..self.n_regions {
                    names[s + r] = format!("log_psi[{r}]");
                }
            } else {
                names[s] = "log_psi".to_string();
            }
        }
        names
    }

    /// Slots that get standard errors in reports: fixed effects and
    /// overdispersion, but not the region deviations.
    pub(crate) fn reportable_slots(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (at, name) in [
            (self.alpha_lambda, "alpha_lambda"),
            (self.alpha_phi, "alpha_phi"),
            (self.beta_phi_pop, "beta_phi_pop"),
            (self.alpha_nu, "alpha_nu"),
            (self.beta_nu_t, "beta_nu_t"),
            (self.beta_nu_t2, "beta_nu_t2"),
            (self.beta_nu_age, "beta_nu_age"),
        ] {
            if let Some(i) = at {
                out.push((i, name.to_string()));
            }
        }
        if let Some(s) = self.log_psi {
            if self.psi_per_region {
                for r in 0..self.n_regions {
                    out.push((s + r, format!("log_psi[{r}]")));
                }
            } else {
                out.push((s, "log_psi".to_string()));
            }
        }
        out
    }

    /// Start of the deviation block of a component, when free.
    pub(crate) fn deviation_block(&self, comp: Component) -> Option<usize> {
        match comp {
            Component::Within => self.b_lambda,
            Component::Between => self.b_phi,
            Component::Endemic => self.b_nu,
        }
    }

    pub(crate) fn n_regions(&self) -> usize {
        self.n_regions
    }

    /// Extract the free vector from `params`.  Overdispersion parameters are
    /// packed on the log scale and must be strictly positive.
    pub fn pack(&self, params: &Params) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.len);
        let mut put = |at: Option<usize>, value: f64| {
            if let Some(i) = at {
                v[i] = value;
            }
        };
        put(self.alpha_lambda, params.alpha_lambda);
        put(self.alpha_phi, params.alpha_phi);
        put(self.beta_phi_pop, params.beta_phi_pop);
        put(self.alpha_nu, params.alpha_nu);
        put(self.beta_nu_t, params.beta_nu_t);
        put(self.beta_nu_t2, params.beta_nu_t2);
        put(self.beta_nu_age, params.beta_nu_age);
        for (start, values) in [
            (self.b_lambda, &params.b_lambda),
            (self.b_phi, &params.b_phi),
            (self.b_nu, &params.b_nu),
        ] {
            if let Some(s) = start {
                for r in 0..self.n_regions {
                    v[s + r] = values[r];
                }
            }
        }
        if let Some(s) = self.log_psi {
            let grab = |psi: f64| -> Result<f64> {
                if psi > 0.0 && psi.is_finite() {
                    Ok(psi.ln())
                } else {
                    Err(Error::NonFiniteInput(format!(
                        "psi = {psi} must be strictly positive to optimize on the log scale"
                    )))
                }
            };
            match (&params.psi, self.psi_per_region) {
                (Psi::Shared(p), false) => v[s] = grab(*p)?,
                (Psi::PerRegion(ps), true) => {
                    for r in 0..self.n_regions {
                        v[s + r] = grab(ps[r])?;
                    }
                }
                (psi, _) => {
                    return Err(Error::DimensionMismatch(format!(
                        "psi parameter {psi:?} does not match the layout"
                    )));
                }
            }
        }
        Ok(v)
    }

    /// Write the free vector back into `params` (inverse of [`Self::pack`]).
    pub fn unpack_into(&self, v: &DVector<f64>, params: &mut Params) {
        debug_assert_eq!(v.len(), self.len);
        let get = |at: Option<usize>, field: &mut f64| {
            if let Some(i) = at {
                *field = v[i];
            }
        };
        get(self.alpha_lambda, &mut params.alpha_lambda);
        get(self.alpha_phi, &mut params.alpha_phi);
        get(self.beta_phi_pop, &mut params.beta_phi_pop);
        get(self.alpha_nu, &mut params.alpha_nu);
        get(self.beta_nu_t, &mut params.beta_nu_t);
        get(self.beta_nu_t2, &mut params.beta_nu_t2);
        get(self.beta_nu_age, &mut params.beta_nu_age);
        for (start, values) in [
            (self.b_lambda, &mut params.b_lambda),
            (self.b_phi, &mut params.b_phi),
            (self.b_nu, &mut params.b_nu),
        ] {
            if let Some(s) = start {
                for r in 0..self.n_regions {
                    values[r] = v[s + r];
                }
            }
        }
        if let Some(s) = self.log_psi {
            if self.psi_per_region {
                params.psi = Psi::PerRegion((0..self.n_regions).map(|r| v[s + r].exp()).collect());
            } else {
                params.psi = Psi::Shared(v[s].exp());
            }
        }
    }
}

/// Precomputed panel context reused across likelihood evaluations.
pub(crate) struct EvalContext<'a> {
    pub spec: &'a ModelSpec,
    pub panel: &'a CountPanel,
    pub cov: &'a RegionCovariates,
    /// Lagged neighbor sums `[region][t-2]`.
    pub neighbor_sums: Vec<f64>,
    pub log_e: Vec<f64>,
    pub log_a: Vec<f64>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        panel: &'a CountPanel,
        cov: &'a RegionCovariates,
        weights: &WeightMatrix,
    ) -> Result<Self> {
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
        Ok(Self {
            spec,
            panel,
            cov,
            neighbor_sums: neighbor_sums(spec, panel, cov, weights)?,
            log_e: cov.pop_share.iter().map(|e| e.ln()).collect(),
            log_a: cov.over65.iter().map(|a| a.ln()).collect(),
        })
    }

    fn n_modelled(&self) -> usize {
        self.panel.n_days() - 1
    }
}

/// Per-region multiplier tables for one parameter point.
struct Multipliers {
    lambda: Vec<f64>,
    phi: Vec<f64>,
    nu_region: Vec<f64>,
    /// `exp(beta_nu_t * t + beta_nu_t2 * t^2)` for t = 2..=T.
    nu_day: Vec<f64>,
}

fn multipliers(ctx: &EvalContext<'_>, params: &Params) -> Multipliers {
    let r = ctx.cov.len();
    let t_days = ctx.panel.n_days();
    let mut lambda = vec![0.0; r];
    let mut phi = vec![0.0; r];
    let mut nu_region = vec![0.0; r];
    for i in 0..r {
        if let Some(w) = &ctx.spec.within {
            let b = if w.random_intercept {
                params.b_lambda[i]
            } else {
                0.0
            };
            lambda[i] = (params.alpha_lambda + b).exp();
        }
        if let Some(bt) = &ctx.spec.between {
            let mut eta = params.alpha_phi;
            if bt.random_intercept {
                eta += params.b_phi[i];
            }
            if bt.log_pop_share {
                eta += params.beta_phi_pop * ctx.log_e[i];
            }
            phi[i] = eta.exp();
        }
        if let Some(en) = &ctx.spec.endemic {
            let mut eta = params.alpha_nu;
            if en.random_intercept {
                eta += params.b_nu[i];
            }
            if en.log_over65 {
                eta += params.beta_nu_age * ctx.log_a[i];
            }
            nu_region[i] = eta.exp();
        }
    }
    let mut nu_day = vec![0.0; t_days - 1];
    if let Some(en) = &ctx.spec.endemic {
        for (idx, day) in nu_day.iter_mut().enumerate() {
            let tf = (idx + 2) as f64;
            let mut eta = 0.0;
            if en.trend {
                eta += params.beta_nu_t * tf;
            }
            if en.trend_quadratic {
                eta += params.beta_nu_t2 * tf * tf;
            }
            *day = eta.exp();
        }
    }
    Multipliers {
        lambda,
        phi,
        nu_region,
        nu_day,
    }
}

/// Fitted means for every modelled cell, laid out `[region][t - 2]`.
pub(crate) fn cell_means(ctx: &EvalContext<'_>, params: &Params) -> Vec<f64> {
    let mult = multipliers(ctx, params);
    let r = ctx.cov.len();
    let tm = ctx.n_modelled();
    let mut mu = vec![0.0; r * tm];
    for i in 0..r {
        for t in 0..tm {
            mu[i * tm + t] = mult.lambda[i] * ctx.panel.count(i, t) as f64
                + mult.phi[i] * ctx.neighbor_sums[i * tm + t]
                + ctx.cov.pop_share[i] * mult.nu_region[i] * mult.nu_day[t];
        }
    }
    mu
}

/// Data log-likelihood at `params` (guard-aware, never errors).
pub(crate) fn eval_loglik(ctx: &EvalContext<'_>, params: &Params) -> f64 {
    let mult = multipliers(ctx, params);
    let r = ctx.cov.len();
    let tm = ctx.n_modelled();
    let mut acc = 0.0;
    for i in 0..r {
        let psi = params.psi.for_region(i);
        for t in 0..tm {
            let y_prev = ctx.panel.count(i, t) as f64;
            let y = ctx.panel.count(i, t + 1);
            let mu = mult.lambda[i] * y_prev
                + mult.phi[i] * ctx.neighbor_sums[i * tm + t]
                + ctx.cov.pop_share[i] * mult.nu_region[i] * mult.nu_day[t];
            let ll = nb_logpmf_guarded(y, mu, psi);
            if is_loglik_guarded(ll) {
                return GUARDED_LOGLIK;
            }
            acc += ll;
        }
    }
    acc
}

/// Analytic score and (optionally) the information matrix of the data
/// log-likelihood over the layout's free parameters.
///
/// The mean-parameter block of the information is the expected (Fisher)
/// information; the overdispersion block is observed curvature.  Expected
/// cross terms between the two vanish for this variance function, so the
/// matrix is block diagonal across that split.
pub(crate) fn eval_grad_info(
    ctx: &EvalContext<'_>,
    params: &Params,
    layout: &ParamLayout,
    want_info: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let mult = multipliers(ctx, params);
    let r = ctx.cov.len();
    let tm = ctx.n_modelled();
    let mut grad: DVector<f64> = DVector::zeros(layout.len());
    let mut info = if want_info {
        Some(DMatrix::zeros(layout.len(), layout.len()))
    } else {
        None
    };
    // (slot, d mu / d theta) pairs for one observation.
    let mut x: Vec<(usize, f64)> = Vec::with_capacity(10);
    for i in 0..r {
        let psi = params.psi.for_region(i);
        let psi_slot = layout.log_psi.map(|s| if layout.psi_per_region { s + i } else { s });
        for t in 0..tm {
            let y_prev = ctx.panel.count(i, t) as f64;
            let y = ctx.panel.count(i, t + 1);
            let yf = y as f64;
            let within = mult.lambda[i] * y_prev;
            let between = mult.phi[i] * ctx.neighbor_sums[i * tm + t];
            let endemic = ctx.cov.pop_share[i] * mult.nu_region[i] * mult.nu_day[t];
            let mu = within + between + endemic;
            if !mu.is_finite() || (mu <= 0.0 && y > 0) {
                return Err(Error::NonFiniteGradient(format!(
                    "mean for region index {i} on modelled day {} is {mu}",
                    t + 2
                )));
            }
            if mu <= 0.0 {
                continue; // certain zero observed as zero: no score, no curvature
            }
            let denom = mu * (1.0 + psi * mu);
            let u = (yf - mu) / denom;
            let v = 1.0 / denom;

            x.clear();
            if let Some(s) = layout.alpha_lambda {
                x.push((s, within));
            }
            if let Some(s) = layout.b_lambda {
                x.push((s + i, within));
            }
            if let Some(s) = layout.alpha_phi {
                x.push((s, between));
            }
            if let Some(s) = layout.b_phi {
                x.push((s + i, between));
            }
            if let Some(s) = layout.beta_phi_pop {
                x.push((s, between * ctx.log_e[i]));
            }
            if let Some(s) = layout.alpha_nu {
                x.push((s, endemic));
            }
            if let Some(s) = layout.b_nu {
                x.push((s + i, endemic));
            }
            let tf = (t + 2) as f64;
            if let Some(s) = layout.beta_nu_t {
                x.push((s, endemic * tf));
            }
            if let Some(s) = layout.beta_nu_t2 {
                x.push((s, endemic * tf * tf));
            }
            if let Some(s) = layout.beta_nu_age {
                x.push((s, endemic * ctx.log_a[i]));
            }

            for &(s, xv) in &x {
                grad[s] += u * xv;
            }
            if let Some(info) = info.as_mut() {
                for &(si, xi) in &x {
                    for &(sj, xj) in &x {
                        if sj <= si {
                            info[(si, sj)] += v * xi * xj;
                        }
                    }
                }
            }
            if let Some(ps) = psi_slot {
                let (d1, d2) = dlogpmf_dlogpsi(y, mu, psi);
                grad[ps] += d1;
                if let Some(info) = info.as_mut() {
                    info[(ps, ps)] -= d2;
                }
            }
        }
    }
    if let Some(info) = info.as_mut() {
        // Mirror the lower triangle.
        for i in 0..layout.len() {
            for j in (i + 1)..layout.len() {
                info[(i, j)] = info[(j, i)];
            }
        }
    }
    for s in 0..layout.len() {
        if !grad[s].is_finite() {
            return Err(Error::NonFiniteGradient(layout.names()[s].clone()));
        }
    }
    Ok((grad, info))
}

/// Panel log-likelihood over modelled days `t = 2..T`.
///
/// Returns [`GUARDED_LOGLIK`] when some mean collapses to zero against a
/// positive count (use [`is_loglik_guarded`] to detect this).
pub fn panel_loglik(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<f64> {
    params.validate(spec, panel.n_regions())?;
    let ctx = EvalContext::new(spec, panel, cov, weights)?;
    Ok(eval_loglik(&ctx, params))
}

/// Analytic gradient of [`panel_loglik`] with named entries.
///
/// Entries exist only for parameters the spec enables; overdispersion is
/// differentiated on the log scale (`log_psi`), so the spec must give it a
/// strictly positive value.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl Gradient {
    /// Value looked up by slot name (None when the term is disabled).
    pub fn by_name(&self, name: &str) -> Option<f64> {
        self.layout
            .names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

/// Gradient of the panel log-likelihood over the spec's free parameters.
pub fn loglik_gradient(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<Gradient> {
    params.validate(spec, panel.n_regions())?;
    let ctx = EvalContext::new(spec, panel, cov, weights)?;
    let layout = ParamLayout::new(spec, panel.n_regions());
    layout.pack(params)?; // reject psi = 0 et al. before differentiating
    let (grad, _) = eval_grad_info(&ctx, params, &layout, false)?;
    Ok(Gradient {
        layout,
        values: grad.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountPanel;
    use crate::graph::{build_adjacency, build_weights, neighbor_order, RegionSet};
    use crate::model::{BetweenTerms, EndemicTerms, WithinTerms};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn poisson_zero_at_unit_mean() {
        assert_relative_eq!(nb_loglik(0, 1.0, 0.0).unwrap(), -1.0);
    }

    #[test]
    fn frozen_reference_values() {
        // High-precision references computed with 60-digit arithmetic.
        assert_relative_eq!(
            nb_loglik(2, 1.5, 0.5).unwrap(),
            -1.715215007977142908567,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            nb_loglik(7, 3.2, 0.25).unwrap(),
            -3.240166430340731269013,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            nb_loglik(0, 2.5, 0.4).unwrap(),
            -1.732867951399863246739,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            nb_loglik(11, 4.0, 0.0).unwrap(),
            -6.253069873555089032109,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            nb_loglik(3, 0.8, 1.5).unwrap(),
            -3.049615351512295816607,
            epsilon = 1e-14
        );
    }

    #[test]
    fn pmf_normalizes() {
        let (mu, psi) = (3.0, 0.7);
        let mut total = 0.0;
        for y in 0..=10_000u64 {
            total += nb_loglik(y, mu, psi).unwrap().exp();
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(nb_loglik(1, f64::NAN, 0.1).is_err());
        assert!(nb_loglik(1, 1.0, f64::INFINITY).is_err());
        assert!(nb_loglik(1, 0.0, 0.1).is_err());
        assert!(nb_loglik(1, -2.0, 0.1).is_err());
        assert!(nb_loglik(1, 2.0, -0.1).is_err());
    }

    #[test]
    fn psi_derivatives_match_finite_differences() {
        let cases: [(u64, f64, f64); 4] =
            [(0, 2.0, 0.3), (4, 1.2, 0.8), (11, 7.5, 0.05), (90, 40.0, 0.4)];
        for &(y, mu, psi) in &cases {
            let h = 1e-6;
            let f = |lp: f64| nb_logpmf_guarded(y, mu, lp.exp());
            let d1_at = |lp: f64| dlogpmf_dlogpsi(y, mu, lp.exp()).0;
            let lp0 = psi.ln();
            let fd1 = (f(lp0 + h) - f(lp0 - h)) / (2.0 * h);
            // Differentiate the analytic first derivative, which keeps the
            // second-difference roundoff out of the comparison.
            let fd2 = (d1_at(lp0 + h) - d1_at(lp0 - h)) / (2.0 * h);
            let (d1, d2) = dlogpmf_dlogpsi(y, mu, psi);
            assert_relative_eq!(d1, fd1, max_relative = 1e-6, epsilon = 1e-8);
            assert_relative_eq!(d2, fd2, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    fn tiny_instance() -> (ModelSpec, RegionSet, CountPanel, RegionCovariates, WeightMatrix)
    {
        let spec = ModelSpec::default();
        let regions = RegionSet::from_ids(&["A", "B", "C"]).unwrap();
        let borders = vec![
            ("A".to_string(), "B".to_string()),
            ("B".to_string(), "C".to_string()),
        ];
        let adj = build_adjacency(&regions, &borders).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![0.2, 0.3, 0.5], vec![0.2, 0.25, 0.3]).unwrap();
        let panel = CountPanel::new(
            vec![
                date("2020-03-01"),
                date("2020-03-02"),
                date("2020-03-03"),
                date("2020-03-04"),
            ],
            vec![5, 7, 1, 3, 2, 9, 4, 1, 3, 0, 8, 2],
            3,
        )
        .unwrap();
        (spec, regions, panel, cov, weights)
    }

    #[test]
    fn single_region_two_days_reduces_to_one_term() {
        let spec = ModelSpec {
            within: Some(WithinTerms {
                random_intercept: false,
            }),
            between: None,
            endemic: Some(EndemicTerms {
                random_intercept: false,
                trend: false,
                trend_quadratic: false,
                log_over65: false,
            }),
            overdispersion: Overdispersion::Shared,
        };
        let regions = RegionSet::from_ids(&["A"]).unwrap();
        let adj = build_adjacency(&regions, &[]).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![1.0], vec![0.2]).unwrap();
        let panel = CountPanel::new(
            vec![date("2020-03-01"), date("2020-03-02")],
            vec![4, 6],
            1,
        )
        .unwrap();
        let mut params = Params::zeros(&spec, 1);
        params.alpha_lambda = 0.3;
        params.alpha_nu = 0.9;
        params.psi = Psi::Shared(0.2);
        let mu = 0.3f64.exp() * 4.0 + 1.0 * 0.9f64.exp();
        let want = nb_loglik(6, mu, 0.2).unwrap();
        let got = panel_loglik(&params, &spec, &panel, &cov, &weights).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn poisson_spec_matches_independent_poisson_sum() {
        let (mut spec, _, panel, cov, weights) = tiny_instance();
        spec.overdispersion = Overdispersion::None;
        let mut params = Params::zeros(&spec, 3);
        params.psi = Psi::None;
        params.alpha_lambda = -1.0;
        params.alpha_phi = -4.0;
        params.alpha_nu = 1.2;
        params.beta_nu_t = 0.05;
        params.beta_nu_t2 = -0.002;
        params.beta_nu_age = 0.4;
        params.beta_phi_pop = 0.6;
        params.b_lambda = vec![0.1, -0.2, 0.05];
        params.b_phi = vec![0.0, 0.1, -0.1];
        params.b_nu = vec![0.2, 0.0, -0.2];

        let m = crate::model::mean(&params, &spec, &panel, &cov, &weights).unwrap();
        let mut want = 0.0;
        for r in 0..3 {
            for t in 2..=4usize {
                let mu = m.total(r, t);
                let y = panel.count(r, t - 1) as f64;
                // Independent Poisson evaluation: y ln mu - mu - ln y!.
                let mut ln_fact = 0.0;
                for j in 2..=(y as u64) {
                    ln_fact += (j as f64).ln();
                }
                want += y * mu.ln() - mu - ln_fact;
            }
        }
        let got = panel_loglik(&params, &spec, &panel, &cov, &weights).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn zero_mean_against_positive_count_guards() {
        // Within-only spec, zero initial counts in one region but a positive
        // later count: that cell has mu = 0, y > 0.
        let spec = ModelSpec {
            within: Some(WithinTerms {
                random_intercept: false,
            }),
            between: None,
            endemic: None,
            overdispersion: Overdispersion::None,
        };
        let regions = RegionSet::from_ids(&["A"]).unwrap();
        let adj = build_adjacency(&regions, &[]).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![1.0], vec![0.2]).unwrap();
        let panel = CountPanel::new(
            vec![date("2020-03-01"), date("2020-03-02")],
            vec![0, 3],
            1,
        )
        .unwrap();
        let mut params = Params::zeros(&spec, 1);
        params.psi = Psi::None;
        let ll = panel_loglik(&params, &spec, &panel, &cov, &weights).unwrap();
        assert!(is_loglik_guarded(ll));
        assert!(ll.is_finite());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (spec, _, panel, cov, weights) = tiny_instance();
        let mut params = Params::zeros(&spec, 3);
        params.alpha_lambda = -0.8;
        params.alpha_phi = -3.0;
        params.alpha_nu = 0.7;
        params.beta_nu_t = 0.04;
        params.beta_nu_t2 = -0.001;
        params.beta_nu_age = 0.3;
        params.beta_phi_pop = 0.5;
        params.b_lambda = vec![0.05, -0.1, 0.02];
        params.b_phi = vec![0.03, 0.0, -0.06];
        params.b_nu = vec![-0.04, 0.08, 0.0];
        params.psi = Psi::Shared(0.3);

        let grad = loglik_gradient(&params, &spec, &panel, &cov, &weights).unwrap();
        let layout = grad.layout.clone();
        let theta0 = layout.pack(&params).unwrap();
        let h = 1e-6;
        for s in 0..layout.len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            let mut tu = theta0.clone();
            let mut td = theta0.clone();
            tu[s] += h;
            td[s] -= h;
            layout.unpack_into(&tu, &mut up);
            layout.unpack_into(&td, &mut dn);
            let fu = panel_loglik(&up, &spec, &panel, &cov, &weights).unwrap();
            let fd = panel_loglik(&dn, &spec, &panel, &cov, &weights).unwrap();
            let fdg = (fu - fd) / (2.0 * h);
            assert_relative_eq!(grad.values[s], fdg, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn disabled_term_has_no_gradient_entry() {
        let (mut spec, _, panel, cov, weights) = tiny_instance();
        spec.endemic = Some(EndemicTerms {
            random_intercept: true,
            trend: true,
            trend_quadratic: false, // disabled
            log_over65: true,
        });
        let params = Params::zeros(&spec, 3);
        let grad = loglik_gradient(&params, &spec, &panel, &cov, &weights).unwrap();
        assert!(grad.by_name("beta_nu_t2").is_none());
        assert!(grad.by_name("beta_nu_t").is_some());
    }

    #[test]
    fn symmetric_regions_get_equal_deviation_gradients() {
        let spec = ModelSpec {
            within: Some(WithinTerms {
                random_intercept: true,
            }),
            between: Some(BetweenTerms {
                random_intercept: true,
                log_pop_share: false,
                use_counts: false,
            }),
            endemic: Some(EndemicTerms {
                random_intercept: true,
                trend: false,
                trend_quadratic: false,
                log_over65: false,
            }),
            overdispersion: Overdispersion::Shared,
        };
        let regions = RegionSet::from_ids(&["A", "B"]).unwrap();
        let adj =
            build_adjacency(&regions, &[("A".to_string(), "B".to_string())]).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![0.5, 0.5], vec![0.2, 0.2]).unwrap();
        // Identical series in both regions.
        let panel = CountPanel::new(
            vec![date("2020-03-01"), date("2020-03-02"), date("2020-03-03")],
            vec![4, 7, 5, 4, 7, 5],
            2,
        )
        .unwrap();
        let mut params = Params::zeros(&spec, 2);
        params.alpha_lambda = -0.5;
        params.alpha_phi = -4.0;
        params.alpha_nu = 0.5;
        params.psi = Psi::Shared(0.2);
        let grad = loglik_gradient(&params, &spec, &panel, &cov, &weights).unwrap();
        assert_relative_eq!(
            grad.by_name("b_lambda[0]").unwrap(),
            grad.by_name("b_lambda[1]").unwrap(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            grad.by_name("b_phi[0]").unwrap(),
            grad.by_name("b_phi[1]").unwrap(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            grad.by_name("b_nu[0]").unwrap(),
            grad.by_name("b_nu[1]").unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn layout_orders_and_freezes() {
        let spec = ModelSpec::default();
        let layout = ParamLayout::new(&spec, 2);
        // 3 intercepts + 3 deviation pairs + beta_phi_pop + 3 endemic betas + log_psi
        assert_eq!(layout.len(), 3 + 6 + 1 + 3 + 1);
        let names = layout.names();
        assert_eq!(names[0], "alpha_lambda");
        assert!(names.contains(&"log_psi".to_string()));

        let frozen = ParamLayout::with_frozen(&spec, 2, [true, false, true]);
        assert_eq!(frozen.len(), layout.len() - 4);
        assert!(!frozen.names().contains(&"b_lambda[0]".to_string()));
        assert!(frozen.names().contains(&"b_phi[1]".to_string()));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let spec = ModelSpec::default();
        let layout = ParamLayout::new(&spec, 3);
        let mut params = Params::zeros(&spec, 3);
        params.alpha_lambda = -1.2;
        params.b_phi = vec![0.3, -0.1, 0.4];
        params.beta_nu_t2 = -0.004;
        params.psi = Psi::Shared(0.7);
        let v = layout.pack(&params).unwrap();
        let mut back = Params::zeros(&spec, 3);
        layout.unpack_into(&v, &mut back);
        back.sigma2_lambda = params.sigma2_lambda;
        back.sigma2_phi = params.sigma2_phi;
        back.sigma2_nu = params.sigma2_nu;
        assert_relative_eq!(back.alpha_lambda, params.alpha_lambda);
        assert_relative_eq!(back.b_phi[2], params.b_phi[2]);
        assert_relative_eq!(back.beta_nu_t2, params.beta_nu_t2);
        match back.psi {
            Psi::Shared(p) => assert_relative_eq!(p, 0.7, epsilon = 1e-15),
            other => panic!("unexpected psi {other:?}"),
        }
    }
}
