//! Penalized-likelihood fitting with Laplace variance updates.
//!
//! The objective is the panel log-likelihood plus a Gaussian penalty on each
//! component's region deviations,
//!
//! ```text
//! pll = loglik - 1/2 * sum_c [ b_c' b_c / sigma2_c + R log(2 pi sigma2_c) ],
//! ```
//!
//! maximized by alternating two blocks until joint convergence:
//!
//! 1. Fisher scoring with step-halving over the fixed effects, the free
//!    deviations, and log-overdispersion ([`newton`]);
//! 2. a Laplace-approximate fixed-point update of each deviation variance,
//!    `sigma2_c <- (b_c' b_c + tr_c(H_bb^{-1})) / R` ([`variance`]).
//!
//! A variance that lands at or below the configured floor marks its
//! component as degenerate: the deviations are pinned to zero, the variance
//! to the floor, and the component drops out of the penalty from then on.
//!
//! Convergence is declared on the parameter scale: a round ends the
//! alternation when its undamped scoring step, its largest variance change,
//! and the relative objective change all fall below their tolerances.

mod init;
mod newton;
mod variance;

use serde::{Deserialize, Serialize};

use crate::data::{CountPanel, RegionCovariates};
use crate::error::{Error, Result};
use crate::graph::WeightMatrix;
use crate::model::likelihood::{
    eval_grad_info, eval_loglik, is_loglik_guarded, EvalContext, ParamLayout,
};
use crate::model::{Component, ModelSpec, Params};

pub(crate) use newton::solve_with_guard;

/// Starting point for the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// All parameters zero (variances one, overdispersion one).
    Zeros,
    /// Poisson regression on the endemic design for the endemic block,
    /// moment-matched overdispersion, and damped autoregressive intercepts.
    #[default]
    EndemicGlm,
}

/// Optimizer controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Maximum alternation rounds between scoring and variance updates.
    pub max_outer_iters: usize,
    /// Maximum Fisher-scoring steps per round.
    pub max_inner_iters: usize,
    /// Convergence threshold on the parameter scale: the max-norm of the
    /// undamped scoring step (the Newton displacement, not the raw gradient,
    /// which grows with panel size) and the largest variance change between
    /// rounds must both fall below it.
    pub tol_params: f64,
    /// Relative penalized log-likelihood change declared negligible.
    pub tol_loglik: f64,
    /// Variance floor; a Laplace update at or below it freezes the component.
    pub sigma2_floor: f64,
    /// Starting point.
    pub init: Init,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer_iters: 500,
            max_inner_iters: 50,
            tol_params: 1e-6,
            tol_loglik: 1e-8,
            sigma2_floor: 1e-8,
            init: Init::EndemicGlm,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol_params > 0.0 && self.tol_loglik > 0.0) {
            return Err(Error::NonFiniteInput(
                "fit tolerances must be strictly positive".to_string(),
            ));
        }
        if !(self.sigma2_floor > 0.0 && self.sigma2_floor.is_normal()) {
            return Err(Error::NonFiniteInput(format!(
                "sigma2_floor must be a normal positive number, got {}",
                self.sigma2_floor
            )));
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(Error::NonFiniteInput(
                "iteration limits must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One fixed effect (or log-overdispersion entry) with its standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    /// Estimate on the optimizer's scale (log scale for overdispersion).
    pub estimate: f64,
    /// Standard error from the inverse penalized information; absent when
    /// that matrix could not be inverted at the returned parameters.
    pub se: Option<f64>,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// The model structure the parameters belong to, so a saved result is
    /// self-describing.
    pub spec: ModelSpec,
    pub params: Params,
    /// Whether the joint convergence test passed within the iteration budget.
    pub converged: bool,
    /// Alternation rounds performed.
    pub outer_iters: usize,
    /// Data log-likelihood at the returned parameters.
    pub loglik: f64,
    /// Penalized log-likelihood; frozen components contribute no penalty.
    pub penalized_loglik: f64,
    /// Laplace approximation to the marginal log-likelihood (deviations
    /// integrated out).  Equals `loglik` when no deviations are active.
    pub marginal_loglik: f64,
    /// `2 k - 2 loglik`, only for specs with no random intercepts.
    pub aic_like: Option<f64>,
    /// Fixed effects and overdispersion with standard errors.
    pub fixed_effects: Vec<FixedEffect>,
    /// Components whose deviation variance froze at the floor, by tag
    /// (`"lambda"`, `"phi"`, `"nu"`).
    pub variance_at_floor: Vec<String>,
    /// Max-norm of the penalized gradient at the returned parameters.
    pub grad_max_norm: f64,
    /// Modelled observations: regions times (days - 1).
    pub n_obs: usize,
    /// Free parameters at the returned layout (deviations included).
    pub n_free_params: usize,
}

/// Components that still carry a penalty: random intercept enabled in the
/// spec and not frozen at the variance floor.
fn live_components(spec: &ModelSpec, frozen: [bool; 3]) -> [bool; 3] {
    let mut live = [false; 3];
    for comp in Component::ALL {
        live[comp.index()] = spec.has_random_intercept(comp) && !frozen[comp.index()];
    }
    live
}

/// Gaussian penalty over the live components (negative contribution).
fn penalty_value(params: &Params, live: [bool; 3], n_regions: usize) -> f64 {
    let mut acc = 0.0;
    for comp in Component::ALL {
        if !live[comp.index()] {
            continue;
        }
        let sigma2 = params.sigma2(comp);
        let b = params.deviations(comp);
        let ss: f64 = b.iter().map(|v| v * v).sum();
        acc -= 0.5
            * (ss / sigma2 + n_regions as f64 * (2.0 * std::f64::consts::PI * sigma2).ln());
    }
    acc
}

fn check_sigma2(params: &Params, spec: &ModelSpec) -> Result<()> {
    for comp in Component::ALL {
        if spec.has_random_intercept(comp) {
            let sigma2 = params.sigma2(comp);
            if !(sigma2.is_normal() && sigma2 > 0.0) {
                return Err(Error::ZeroVariance {
                    component: comp.tag(),
                    value: sigma2,
                });
            }
        }
    }
    Ok(())
}

/// Penalized log-likelihood of the data at `params`.
///
/// The penalty runs over every component with a random intercept in the
/// spec; a non-positive (or subnormal) deviation variance is rejected with
/// [`Error::ZeroVariance`].  A degenerate mean against a positive count
/// returns the guard value (see
/// [`is_loglik_guarded`](crate::is_loglik_guarded)).
pub fn penalized_loglik(
    params: &Params,
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
) -> Result<f64> {
    params.validate(spec, panel.n_regions())?;
    check_sigma2(params, spec)?;
    let ctx = EvalContext::new(spec, panel, cov, weights)?;
    let ll = eval_loglik(&ctx, params);
    if is_loglik_guarded(ll) {
        return Ok(ll);
    }
    Ok(ll + penalty_value(params, live_components(spec, [false; 3]), panel.n_regions()))
}

/// Maximize the penalized log-likelihood.
///
/// Returns `Ok` with `converged = false` when the iteration budget runs out
/// or when a round can move neither the parameters nor the variances while
/// still above tolerance; hard failures (structurally singular information,
/// non-finite steps, invalid inputs) are errors.
pub fn fit(
    spec: &ModelSpec,
    panel: &CountPanel,
    cov: &RegionCovariates,
    weights: &WeightMatrix,
    opts: &FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    opts.validate()?;
    let ctx = EvalContext::new(spec, panel, cov, weights)?;
    let n_regions = panel.n_regions();

    let mut params = match opts.init {
        Init::Zeros => Params::zeros(spec, n_regions),
        Init::EndemicGlm => init::endemic_glm(&ctx)?,
    };
    check_sigma2(&params, spec)?;
    if is_loglik_guarded(eval_loglik(&ctx, &params)) {
        return Err(Error::NonFiniteInput(
            "initial log-likelihood is degenerate: some positive count has a \
             structurally zero mean under this spec"
                .to_string(),
        ));
    }

    let mut frozen = [false; 3];
    let mut converged = false;
    let mut outer_done = 0;
    let mut prev_pll = f64::NEG_INFINITY;

    for outer in 1..=opts.max_outer_iters {
        let live = live_components(spec, frozen);
        let layout = ParamLayout::with_frozen(spec, n_regions, frozen);
        let report = newton::inner_maximize(&ctx, &mut params, &layout, live, opts, outer == 1)?;
        let update = variance::update_variances(&ctx, &mut params, frozen, opts)?;
        for comp in Component::ALL {
            if update.newly_frozen[comp.index()] {
                frozen[comp.index()] = true;
            }
        }
        outer_done = outer;
        let rel_change = (report.entry_pll - prev_pll).abs() / (1.0 + report.entry_pll.abs());
        prev_pll = report.entry_pll;
        log::info!(
            "outer {outer}: pll {:.6}, grad max {:.3e}, step {:.3e}, sigma change {:.3e}",
            report.entry_pll,
            report.entry_grad_max,
            report.step_max,
            update.max_change
        );
        if report.status != newton::InnerStatus::Stalled
            && report.step_max < opts.tol_params
            && update.max_change < opts.tol_params
            && rel_change < opts.tol_loglik
        {
            converged = true;
            break;
        }
        if report.status == newton::InnerStatus::Stalled
            && update.max_change < opts.tol_params
        {
            // The round moved neither the parameters nor the variances, so
            // every following round would repeat it exactly.
            log::warn!(
                "stationary with step {:.3e} above the tolerance at outer {outer}; stopping early",
                report.step_max
            );
            break;
        }
    }

    // Quantities at the returned parameters.
    let live = live_components(spec, frozen);
    let layout = ParamLayout::with_frozen(spec, n_regions, frozen);
    let (mut grad, info) = eval_grad_info(&ctx, &params, &layout, true)?;
    let mut info = info.expect("information requested");
    newton::apply_penalty_to_gradient(&mut grad, &params, &layout, live);
    let grad_max_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let loglik = eval_loglik(&ctx, &params);
    let penalized = loglik + penalty_value(&params, live, n_regions);

    let marginal_loglik =
        variance::marginal_loglik(&ctx, &params, &layout, live, penalized)?;

    newton::apply_penalty_to_information(&mut info, &params, &layout, live);
    newton::floor_overdispersion_curvature(&mut info, &layout);
    let fixed_effects = {
        let theta = layout.pack(&params)?;
        let inverse =
            match solve_with_guard(&mut info.clone(), "standard errors", newton::Deficiency::Ridge, None)
            {
                Ok(ch) => Some(ch.inverse()),
                Err(_) => None,
            };
        layout
            .reportable_slots()
            .into_iter()
            .map(|(slot, name)| FixedEffect {
                name,
                estimate: theta[slot],
                se: inverse.as_ref().and_then(|inv| {
                    let v = inv[(slot, slot)];
                    (v >= 0.0).then(|| v.sqrt())
                }),
            })
            .collect()
    };

    let aic_like = spec
        .is_fixed_effects_only()
        .then(|| 2.0 * layout.len() as f64 - 2.0 * loglik);
    let variance_at_floor = Component::ALL
        .iter()
        .filter(|c| frozen[c.index()])
        .map(|c| c.tag().to_string())
        .collect();

    Ok(FitResult {
        spec: spec.clone(),
        params,
        converged,
        outer_iters: outer_done,
        loglik,
        penalized_loglik: penalized,
        marginal_loglik,
        aic_like,
        fixed_effects,
        variance_at_floor,
        grad_max_norm,
        n_obs: n_regions * (panel.n_days() - 1),
        n_free_params: layout.len(),
    })
}
