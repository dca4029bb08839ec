//! Data-driven starting points for the optimizer.
//!
//! The endemic block is warm-started by a Poisson regression of the counts
//! on the endemic design alone (offset `log e_r`).  The autoregressive
//! intercepts start at damped values: the within multiplier at 0.1, the
//! between multiplier scaled so that its typical contribution is about a
//! tenth of a typical count — which makes the starting point, and therefore
//! the whole fit, equivariant under a rescaling of the weight matrix.
//! Overdispersion starts at a moment estimate from Pearson residuals.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{cholesky, CholOutcome};
use crate::model::likelihood::{cell_means, EvalContext};
use crate::model::{Overdispersion, Params, Psi};

const IRLS_ITERS: usize = 25;
const IRLS_TOL: f64 = 1e-10;
const PSI_INIT_MIN: f64 = 1e-4;
const PSI_INIT_MAX: f64 = 10.0;

pub(crate) fn endemic_glm(ctx: &EvalContext<'_>) -> Result<Params> {
    let spec = ctx.spec;
    let n_regions = ctx.cov.len();
    let tm = ctx.panel.n_days() - 1;
    let mut params = Params::zeros(spec, n_regions);

    if let Some(en) = &spec.endemic {
        // Column layout: intercept, then the enabled endemic terms.
        let design_row = |t1: f64, log_a: f64| -> Vec<f64> {
            let mut row = vec![1.0];
            if en.trend {
                row.push(t1);
            }
            if en.trend_quadratic {
                row.push(t1 * t1);
            }
            if en.log_over65 {
                row.push(log_a);
            }
            row
        };
        let p = design_row(2.0, ctx.log_a[0]).len();
        let n = n_regions * tm;
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut offset = DVector::zeros(n);
        for i in 0..n_regions {
            for t in 0..tm {
                let row = design_row((t + 2) as f64, ctx.log_a[i]);
                let at = i * tm + t;
                for (j, v) in row.iter().enumerate() {
                    x[(at, j)] = *v;
                }
                y[at] = ctx.panel.count(i, t + 1) as f64;
                offset[at] = ctx.log_e[i];
            }
        }
        if let Some(beta) = poisson_irls(&x, &y, &offset) {
            let mut at = 0usize;
            params.alpha_nu = beta[at];
            at += 1;
            if en.trend {
                params.beta_nu_t = beta[at];
                at += 1;
            }
            if en.trend_quadratic {
                params.beta_nu_t2 = beta[at];
                at += 1;
            }
            if en.log_over65 {
                params.beta_nu_age = beta[at];
            }
        } else {
            log::warn!("endemic warm-start regression failed; starting that block at zero");
        }
    }

    if spec.within.is_some() {
        params.alpha_lambda = 0.1f64.ln();
    }
    if spec.between.is_some() {
        let n = (n_regions * tm) as f64;
        let mut ybar = 0.0;
        let mut sbar = 0.0;
        for i in 0..n_regions {
            for t in 0..tm {
                ybar += ctx.panel.count(i, t + 1) as f64;
                sbar += ctx.neighbor_sums[i * tm + t];
            }
        }
        ybar /= n;
        sbar /= n;
        // Dividing by the raw mean neighbor sum keeps this start exactly
        // equivariant under a rescaled weight matrix.
        params.alpha_phi = if sbar > 0.0 {
            (0.1 * (ybar + 0.1) / sbar).ln()
        } else {
            0.1f64.ln()
        };
    }

    if spec.overdispersion != Overdispersion::None {
        let mu = cell_means(ctx, &params);
        let psi0 = |cells: &mut dyn Iterator<Item = usize>| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for at in cells {
                let i = at / tm;
                let t = at % tm;
                let y = ctx.panel.count(i, t + 1) as f64;
                let m = mu[at];
                num += (y - m) * (y - m) - m;
                den += m * m;
            }
            if den > 0.0 {
                (num / den).clamp(PSI_INIT_MIN, PSI_INIT_MAX)
            } else {
                1.0
            }
        };
        params.psi = match spec.overdispersion {
            Overdispersion::Shared => Psi::Shared(psi0(&mut (0..n_regions * tm))),
            Overdispersion::PerRegion => Psi::PerRegion(
                (0..n_regions)
                    .map(|i| psi0(&mut (i * tm..(i + 1) * tm)))
                    .collect(),
            ),
            Overdispersion::None => unreachable!(),
        };
    }
    Ok(params)
}

/// Poisson log-likelihood up to the `y!` constant.
fn poisson_loglik(x: &DMatrix<f64>, y: &DVector<f64>, offset: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta + offset;
    let mut acc = 0.0;
    for i in 0..x.nrows() {
        acc += y[i] * eta[i] - eta[i].exp();
    }
    acc
}

/// Poisson regression with log link and offset.  Newton steps are halved
/// until the log-likelihood does not decrease, which makes the iteration
/// globally convergent on this strictly concave objective; `None` when the
/// normal equations cannot be factored or the iteration budget runs out.
fn poisson_irls(x: &DMatrix<f64>, y: &DVector<f64>, offset: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut beta: DVector<f64> = DVector::zeros(p);
    // Start the intercept at the matched-total value (the intercept-only
    // maximum) so the first Newton step is a local one; a cold start at
    // zero can overshoot by tens of log units on offsets far from the data.
    let total_y = y.sum();
    let total_e: f64 = offset.iter().map(|o| o.exp()).sum();
    if total_y > 0.0 && total_e > 0.0 {
        beta[0] = (total_y / total_e).ln();
    }
    let mut ll = poisson_loglik(x, y, offset, &beta);
    if !ll.is_finite() {
        return None;
    }
    for _ in 0..IRLS_ITERS {
        let eta = x * &beta + offset;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for i in 0..n {
            let mu: f64 = eta[i].exp();
            if !mu.is_finite() {
                return None;
            }
            for a in 0..p {
                score[a] += (y[i] - mu) * x[(i, a)];
                for b in 0..=a {
                    xtwx[(a, b)] += mu * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in (a + 1)..p {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let delta = match cholesky(&xtwx) {
            CholOutcome::Factored(ch) => ch.solve(&score),
            CholOutcome::FailedPivot { .. } => return None,
        };
        let mut step = 1.0;
        let mut moved = 0.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &beta + &delta * step;
            let trial_ll = poisson_loglik(x, y, offset, &trial);
            if trial_ll.is_finite() && trial_ll >= ll {
                moved = delta.amax() * step;
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Numerically stationary: no step length improves the fit.
            return beta.iter().all(|v| v.is_finite()).then_some(beta);
        }
        if moved < IRLS_TOL {
            return Some(beta);
        }
    }
    // Budget exhausted while still moving: treat as failed rather than hand
    // back a point that may be far from the optimum.
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountPanel, RegionCovariates};
    use crate::graph::{build_adjacency, build_weights, neighbor_order, RegionSet};
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn irls_recovers_a_log_linear_trend() {
        // Deterministic "counts" equal to the Poisson mean: IRLS solves the
        // score equations exactly, so the coefficients come back exactly.
        let n = 40;
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        let offset = DVector::from_element(n, -1.2);
        let (b0, b1) = (0.8, 0.05);
        for i in 0..n {
            let t = (i + 1) as f64;
            x[(i, 0)] = 1.0;
            x[(i, 1)] = t;
            y[i] = (-1.2 + b0 + b1 * t).exp();
        }
        let beta = poisson_irls(&x, &y, &offset).unwrap();
        assert_relative_eq!(beta[0], b0, epsilon = 1e-8);
        assert_relative_eq!(beta[1], b1, epsilon = 1e-8);
    }

    #[test]
    fn warm_start_is_equivariant_under_weight_scaling() {
        let regions = RegionSet::from_ids(&["A", "B", "C"]).unwrap();
        let borders = vec![
            ("A".to_string(), "B".to_string()),
            ("B".to_string(), "C".to_string()),
        ];
        let adj = build_adjacency(&regions, &borders).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let scaled = weights.scaled(7.5);
        let cov = RegionCovariates::new(vec![0.25, 0.35, 0.4], vec![0.2, 0.22, 0.3]).unwrap();
        let panel = CountPanel::new(
            (0..6)
                .map(|d| date("2020-03-01") + chrono::Days::new(d))
                .collect(),
            vec![
                3, 5, 4, 6, 7, 5, //
                2, 4, 6, 5, 7, 9, //
                4, 3, 5, 7, 6, 8,
            ],
            3,
        )
        .unwrap();
        let spec = ModelSpec::default();
        let base = {
            let ctx = EvalContext::new(&spec, &panel, &cov, &weights).unwrap();
            endemic_glm(&ctx).unwrap()
        };
        let shifted = {
            let ctx = EvalContext::new(&spec, &panel, &cov, &scaled).unwrap();
            endemic_glm(&ctx).unwrap()
        };
        // alpha_phi absorbs the scale exactly; everything else is identical.
        assert_relative_eq!(
            shifted.alpha_phi,
            base.alpha_phi - 7.5f64.ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(shifted.alpha_lambda, base.alpha_lambda);
        assert_relative_eq!(shifted.alpha_nu, base.alpha_nu);
        match (&base.psi, &shifted.psi) {
            (Psi::Shared(a), Psi::Shared(b)) => assert_relative_eq!(a, b, epsilon = 1e-12),
            other => panic!("unexpected psi pair {other:?}"),
        }
    }
}
