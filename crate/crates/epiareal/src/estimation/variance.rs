//! Laplace-approximate updates of the deviation variances.
//!
//! With the other parameters held at their current values, each variance
//! solves the fixed point
//!
//! ```text
//! sigma2_c = ( b_c' b_c + tr_c(H_bb^{-1}) ) / R,
//! ```
//!
//! where `H_bb` is the joint curvature of the penalized objective in the
//! free deviations: the data information restricted to those slots plus
//! `1/sigma2` on the diagonal.  The trace term is the Laplace correction for
//! the uncertainty of the deviations; dropping it would give the naive
//! empirical variance of the modes, which is biased low.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::likelihood::{eval_grad_info, EvalContext, ParamLayout};
use crate::model::{Component, Params};

use super::newton::{solve_with_guard, Deficiency};
use super::FitOptions;

const MAX_FIXED_POINT_ITERS: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-12;

pub(crate) struct VarianceUpdate {
    /// Largest absolute change of any live variance across the whole update
    /// (infinite when a component froze, which forces another outer round).
    pub max_change: f64,
    pub newly_frozen: [bool; 3],
}

/// Live components in layout order with their offsets into the packed
/// deviation block.
fn deviation_ranges(
    layout: &ParamLayout,
    live: [bool; 3],
) -> Vec<(Component, usize, usize)> {
    let r = layout.n_regions();
    let mut out = Vec::new();
    let mut offset = 0;
    for comp in Component::ALL {
        if !live[comp.index()] {
            continue;
        }
        if let Some(start) = layout.deviation_block(comp) {
            out.push((comp, start, offset));
            offset += r;
        }
    }
    out
}

/// Data information restricted to the free deviation slots.
fn deviation_information(
    info: &DMatrix<f64>,
    layout: &ParamLayout,
    ranges: &[(Component, usize, usize)],
) -> DMatrix<f64> {
    let r = layout.n_regions();
    let n = ranges.len() * r;
    let mut out = DMatrix::zeros(n, n);
    for &(_, start_i, off_i) in ranges {
        for &(_, start_j, off_j) in ranges {
            for a in 0..r {
                for b in 0..r {
                    out[(off_i + a, off_j + b)] = info[(start_i + a, start_j + b)];
                }
            }
        }
    }
    out
}

/// One outer-round variance update.  Mutates the variances in `params`;
/// when the fixed point drops a variance to the floor the component's
/// deviations are zeroed and it is reported as newly frozen.
pub(crate) fn update_variances(
    ctx: &EvalContext<'_>,
    params: &mut Params,
    frozen: [bool; 3],
    opts: &FitOptions,
) -> Result<VarianceUpdate> {
    let live = super::live_components(ctx.spec, frozen);
    let layout = ParamLayout::with_frozen(ctx.spec, ctx.cov.len(), frozen);
    let ranges = deviation_ranges(&layout, live);
    if ranges.is_empty() {
        return Ok(VarianceUpdate {
            max_change: 0.0,
            newly_frozen: [false; 3],
        });
    }
    let r = layout.n_regions();
    let rf = r as f64;
    let (_, info) = eval_grad_info(ctx, params, &layout, true)?;
    let info = info.expect("information requested");
    let i_bb = deviation_information(&info, &layout, &ranges);

    let ss: Vec<f64> = ranges
        .iter()
        .map(|&(comp, _, _)| params.deviations(comp).iter().map(|v| v * v).sum())
        .collect();
    let entry: Vec<f64> = ranges
        .iter()
        .map(|&(comp, _, _)| params.sigma2(comp))
        .collect();
    let mut cur = entry.clone();
    let mut newly_frozen = [false; 3];

    for _ in 0..MAX_FIXED_POINT_ITERS {
        let mut h = i_bb.clone();
        for (c, &(_, _, off)) in ranges.iter().enumerate() {
            for a in 0..r {
                h[(off + a, off + a)] += 1.0 / cur[c];
            }
        }
        let factor = solve_with_guard(&mut h, "variance update", Deficiency::Ridge, None)?;
        let inverse = factor.inverse();
        let mut step_change = 0.0f64;
        let mut froze = false;
        for (c, &(comp, _, off)) in ranges.iter().enumerate() {
            let trace: f64 = (0..r).map(|a| inverse[(off + a, off + a)]).sum();
            let next = (ss[c] + trace) / rf;
            if next <= opts.sigma2_floor {
                *params.sigma2_mut(comp) = opts.sigma2_floor;
                params.deviations_mut(comp).iter_mut().for_each(|v| *v = 0.0);
                newly_frozen[comp.index()] = true;
                froze = true;
            } else {
                step_change = step_change.max((next - cur[c]).abs());
                cur[c] = next;
            }
        }
        if froze {
            // Write back the surviving variances and force another round.
            for (c, &(comp, _, _)) in ranges.iter().enumerate() {
                if !newly_frozen[comp.index()] {
                    *params.sigma2_mut(comp) = cur[c];
                }
            }
            return Ok(VarianceUpdate {
                max_change: f64::INFINITY,
                newly_frozen,
            });
        }
        if step_change < FIXED_POINT_TOL {
            break;
        }
    }

    let mut max_change = 0.0f64;
    for (c, &(comp, _, _)) in ranges.iter().enumerate() {
        *params.sigma2_mut(comp) = cur[c];
        max_change = max_change.max((cur[c] - entry[c]).abs());
    }
    Ok(VarianceUpdate {
        max_change,
        newly_frozen,
    })
}

/// Laplace approximation to the marginal log-likelihood: the penalized
/// objective corrected by the curvature of the deviations,
/// `pll + (n_b / 2) log(2 pi) - log det(H_bb) / 2`.
pub(crate) fn marginal_loglik(
    ctx: &EvalContext<'_>,
    params: &Params,
    layout: &ParamLayout,
    live: [bool; 3],
    penalized: f64,
) -> Result<f64> {
    let ranges = deviation_ranges(layout, live);
    if ranges.is_empty() {
        return Ok(penalized);
    }
    let r = layout.n_regions();
    let (_, info) = eval_grad_info(ctx, params, layout, true)?;
    let info = info.expect("information requested");
    let mut h = deviation_information(&info, layout, &ranges);
    for &(comp, _, off) in &ranges {
        let sigma2 = params.sigma2(comp);
        for a in 0..r {
            h[(off + a, off + a)] += 1.0 / sigma2;
        }
    }
    let n_b = (ranges.len() * r) as f64;
    let factor = solve_with_guard(&mut h, "marginal log-likelihood", Deficiency::Ridge, None)?;
    Ok(penalized + 0.5 * n_b * (2.0 * std::f64::consts::PI).ln() - 0.5 * factor.log_det())
}
