//! Fisher scoring with step-halving over fixed effects, free deviations,
//! and log-overdispersion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholOutcome, Cholesky, RANK_TOL};
use crate::model::likelihood::{
    eval_grad_info, eval_loglik, is_loglik_guarded, EvalContext, ParamLayout,
};
use crate::model::{Component, Params};

use super::{penalty_value, FitOptions};

const MAX_HALVINGS: u32 = 30;
const RIDGE: f64 = 1e-8;
/// Relative slack in the line-search acceptance test.  Near the optimum a
/// scoring step improves the objective by less than the round-off noise of
/// the objective itself, so insisting on a strict increase would reject
/// every step and strand the gradient above its tolerance.  A few ulps of
/// tolerated decrease let the gradient criterion finish the endgame.
///
/// Slack acceptance alone can cycle: an overshooting step that loses less
/// than the slack gets taken, kicks the gradient back up, and the contraction
/// that follows returns to the same point.  A step inside the slack band is
/// therefore only accepted when it also shrinks the gradient max-norm by
/// [`GRAD_CONTRACT_MARGIN`].
const ACCEPT_SLACK: f64 = 1e-12;
/// Minimum relative gradient contraction a non-improving step must deliver.
const GRAD_CONTRACT_MARGIN: f64 = 1e-3;

/// Subtract the penalty gradient `b / sigma2` on live deviation slots.
pub(crate) fn apply_penalty_to_gradient(
    grad: &mut DVector<f64>,
    params: &Params,
    layout: &ParamLayout,
    live: [bool; 3],
) {
    for comp in Component::ALL {
        if !live[comp.index()] {
            continue;
        }
        let Some(start) = layout.deviation_block(comp) else {
            continue;
        };
        let sigma2 = params.sigma2(comp);
        let b = params.deviations(comp);
        for r in 0..layout.n_regions() {
            grad[start + r] -= b[r] / sigma2;
        }
    }
}

/// Add the penalty curvature `1 / sigma2` on live deviation slots.
pub(crate) fn apply_penalty_to_information(
    info: &mut DMatrix<f64>,
    params: &Params,
    layout: &ParamLayout,
    live: [bool; 3],
) {
    for comp in Component::ALL {
        if !live[comp.index()] {
            continue;
        }
        let Some(start) = layout.deviation_block(comp) else {
            continue;
        };
        let sigma2 = params.sigma2(comp);
        for r in 0..layout.n_regions() {
            info[(start + r, start + r)] += 1.0 / sigma2;
        }
    }
}

/// Keep the observed log-overdispersion curvature positive so the scoring
/// matrix stays positive definite; the mean block is exactly decoupled from
/// these slots, so flooring the diagonal cannot disturb it.
pub(crate) fn floor_overdispersion_curvature(info: &mut DMatrix<f64>, layout: &ParamLayout) {
    let scale = info.diagonal().iter().fold(0.0f64, |m, d| m.max(*d));
    let floor = RIDGE * scale.max(1.0);
    for (slot, name) in layout.reportable_slots() {
        if name.starts_with("log_psi") && info[(slot, slot)] < floor {
            info[(slot, slot)] = floor;
        }
    }
}

/// How a rank-deficient scoring matrix should be treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Deficiency {
    /// Rank deficiency is a modelling error (collinear design): fail.  Used
    /// at the starting point, where degeneracy must be structural.
    Reject,
    /// Rank deficiency reflects a component drifting to its boundary during
    /// iteration (columns scale with a dying multiplier): stabilize with a
    /// ridge and keep going; the gradient along such directions vanishes
    /// with the multiplier, so convergence is still decided honestly.
    Ridge,
}

/// Factor a penalized information matrix.  A transient failed pivot is
/// always worth one ridge retry; a (numerically) zero pivot or an
/// out-of-tolerance pivot ratio is handled per `on_deficiency`.  Mutates
/// `info` only when the ridge is applied.
pub(crate) fn solve_with_guard(
    info: &mut DMatrix<f64>,
    context: &str,
    on_deficiency: Deficiency,
    slot_names: Option<&[String]>,
) -> Result<Cholesky> {
    let scale = info.diagonal().iter().fold(0.0f64, |m, d| m.max(*d));
    let singular = |detail: String| Error::SingularInformation(format!("{context}: {detail}"));
    let describe = |index: usize| -> String {
        match slot_names.and_then(|n| n.get(index)) {
            Some(name) => format!("slot {index} ({name})"),
            None => format!("slot {index}"),
        }
    };
    let apply_ridge = |info: &mut DMatrix<f64>| {
        let ridge = RIDGE * scale.max(1.0);
        for i in 0..info.nrows() {
            info[(i, i)] += ridge;
        }
    };
    match cholesky(info) {
        CholOutcome::Factored(ch) => {
            if !ch.rank_deficient(scale) {
                return Ok(ch);
            }
            if on_deficiency == Deficiency::Reject {
                return Err(singular(format!(
                    "pivot ratio {:.3e} at {} is below the rank threshold",
                    ch.min_pivot / scale.max(1.0),
                    describe(ch.min_pivot_index)
                )));
            }
            apply_ridge(info);
            match cholesky(info) {
                CholOutcome::Factored(ch) => Ok(ch),
                CholOutcome::FailedPivot { index, pivot } => Err(singular(format!(
                    "pivot {pivot:.3e} at {} persisted through a ridge retry",
                    describe(index)
                ))),
            }
        }
        CholOutcome::FailedPivot { index, pivot } => {
            if on_deficiency == Deficiency::Reject && pivot.abs() <= RANK_TOL * scale.max(1.0) {
                // A (numerically) zero pivot at the starting point is
                // structural: some direction of the design carries no
                // information.
                return Err(singular(format!(
                    "zero pivot at {} (column is a linear combination of \
                     earlier ones)",
                    describe(index)
                )));
            }
            apply_ridge(info);
            match cholesky(info) {
                CholOutcome::Factored(ch) => Ok(ch),
                CholOutcome::FailedPivot { index, pivot } => Err(singular(format!(
                    "pivot {pivot:.3e} at {} persisted through a ridge retry",
                    describe(index)
                ))),
            }
        }
    }
}

/// Penalized log-likelihood at `params` given the live-component mask.
fn penalized_at(ctx: &EvalContext<'_>, params: &Params, live: [bool; 3]) -> f64 {
    let ll = eval_loglik(ctx, params);
    if is_loglik_guarded(ll) {
        return ll;
    }
    ll + penalty_value(params, live, ctx.cov.len())
}

/// What one inner maximization achieved, for the outer loop's stall logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InnerStatus {
    /// The scoring step already met its tolerance at entry; nothing to do.
    AtTolerance,
    /// At least one scoring step was accepted.
    Moved,
    /// Above tolerance, but no step length was acceptable.
    Stalled,
}

/// Outcome of one inner maximization round.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerReport {
    pub status: InnerStatus,
    /// Max-norm of the last undamped scoring step (parameter scale): the
    /// quantity the outer convergence test compares against `tol_params`.
    pub step_max: f64,
    /// Penalized objective at entry, before any step.
    pub entry_pll: f64,
    /// Penalized gradient max-norm at entry.
    pub entry_grad_max: f64,
}

/// Whether the penalized gradient at `candidate` is measurably smaller than
/// `current_max`.  This guards the slack acceptance: a step that neither
/// improves the objective nor contracts the gradient is an endgame wobble,
/// and taking it can cycle forever just above the tolerance.  A trial point
/// with a non-finite gradient is simply not acceptable.
fn contracts_gradient(
    ctx: &EvalContext<'_>,
    candidate: &Params,
    layout: &ParamLayout,
    live: [bool; 3],
    current_max: f64,
) -> Result<bool> {
    let mut grad = match eval_grad_info(ctx, candidate, layout, false) {
        Ok((grad, _)) => grad,
        Err(Error::NonFiniteGradient(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    apply_penalty_to_gradient(&mut grad, candidate, layout, live);
    let new_max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(new_max <= current_max * (1.0 - GRAD_CONTRACT_MARGIN))
}

/// Maximize the penalized log-likelihood over the layout's free parameters
/// with the deviation variances held fixed.  A step is accepted when it
/// strictly improves the objective, or when it stays within round-off slack
/// of it while contracting the gradient; the iteration ends when the
/// undamped scoring step falls below `tol_params`, when no step length is
/// acceptable, or when the budget runs out.
///
/// `structural_check` makes the first scoring matrix subject to the strict
/// rank test: deficiency at the starting point means a collinear design.
pub(crate) fn inner_maximize(
    ctx: &EvalContext<'_>,
    params: &mut Params,
    layout: &ParamLayout,
    live: [bool; 3],
    opts: &FitOptions,
    structural_check: bool,
) -> Result<InnerReport> {
    let mut pll = penalized_at(ctx, params, live);
    let mut theta = layout.pack(params)?;
    let mut candidate = params.clone();
    let names = layout.names();
    let entry_pll = pll;
    let mut entry_grad_max = f64::NAN;
    let mut step_max = f64::INFINITY;
    let mut moved = false;
    let done = |moved: bool, stalled: bool| {
        if moved {
            InnerStatus::Moved
        } else if stalled {
            InnerStatus::Stalled
        } else {
            InnerStatus::AtTolerance
        }
    };
    for iter in 0..opts.max_inner_iters {
        let (mut grad, info) = eval_grad_info(ctx, params, layout, true)?;
        let mut info = info.expect("information requested");
        apply_penalty_to_gradient(&mut grad, params, layout, live);
        apply_penalty_to_information(&mut info, params, layout, live);
        floor_overdispersion_curvature(&mut info, layout);
        let grad_max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if iter == 0 {
            entry_grad_max = grad_max;
        }
        let on_deficiency = if structural_check && iter == 0 {
            Deficiency::Reject
        } else {
            Deficiency::Ridge
        };
        let factor = solve_with_guard(&mut info, "scoring step", on_deficiency, Some(&names))?;
        let delta = factor.solve(&grad);
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFiniteStep { iter });
        }
        step_max = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if step_max < opts.tol_params {
            return Ok(InnerReport {
                status: done(moved, false),
                step_max,
                entry_pll,
                entry_grad_max,
            });
        }

        let mut step = 1.0;
        let mut accepted = false;
        let floor = pll - ACCEPT_SLACK * (1.0 + pll.abs());
        for _ in 0..=MAX_HALVINGS {
            let trial = &theta + &delta * step;
            layout.unpack_into(&trial, &mut candidate);
            let trial_pll = penalized_at(ctx, &candidate, live);
            let usable = trial_pll.is_finite() && !is_loglik_guarded(trial_pll);
            let acceptable = usable
                && (trial_pll > pll
                    || (trial_pll >= floor
                        && contracts_gradient(ctx, &candidate, layout, live, grad_max)?));
            if acceptable {
                theta = trial;
                layout.unpack_into(&theta, params);
                pll = trial_pll;
                accepted = true;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Neither improvement nor gradient contraction at any step
            // length: numerically stationary.
            return Ok(InnerReport {
                status: done(moved, true),
                step_max,
                entry_pll,
                entry_grad_max,
            });
        }
    }
    Ok(InnerReport {
        status: done(moved, true),
        step_max,
        entry_pll,
        entry_grad_max,
    })
}

