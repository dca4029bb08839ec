//! Presentation helpers: fixed-effect tables and CSV writers.
//!
//! Multiplicative parameters (intercepts, daily trend factors) are shown on
//! the natural scale, `exp(estimate)`; elasticity-style coefficients on log
//! covariates stay on their own scale.  Standard errors and z-values always
//! refer to the estimation (log) scale.  Significance markers: `***` for
//! `|z| > 2.5758` (1%), `**` for `|z| > 1.9600` (5%), `*` for `|z| > 1.6449`
//! (10%).

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::estimation::FitResult;
use crate::forecast::{Decomposition, Forecast};
use crate::graph::RegionSet;
use crate::model::{Component, Psi};

fn stars(z: f64) -> &'static str {
    let a = z.abs();
    if a > 2.5758 {
        "***"
    } else if a > 1.9600 {
        "**"
    } else if a > 1.6449 {
        "*"
    } else {
        ""
    }
}

/// Natural-scale display value and label for an estimation-scale entry.
fn display_row(name: &str, estimate: f64) -> (String, f64) {
    match name {
        "alpha_lambda" => ("within multiplier exp(alpha_lambda)".to_string(), estimate.exp()),
        "alpha_phi" => ("between multiplier exp(alpha_phi)".to_string(), estimate.exp()),
        "alpha_nu" => ("endemic level exp(alpha_nu)".to_string(), estimate.exp()),
        "beta_nu_t" => ("daily trend factor exp(beta_nu_t)".to_string(), estimate.exp()),
        "beta_nu_t2" => (
            "quadratic trend factor exp(beta_nu_t2)".to_string(),
            estimate.exp(),
        ),
        "beta_phi_pop" => ("pop-share exponent beta_phi_pop".to_string(), estimate),
        "beta_nu_age" => ("over-65 exponent beta_nu_age".to_string(), estimate),
        "log_psi" => ("overdispersion psi".to_string(), estimate.exp()),
        other if other.starts_with("log_psi[") => {
            let idx = &other["log_psi[".len()..other.len() - 1];
            (format!("overdispersion psi[{idx}]"), estimate.exp())
        }
        other => (other.to_string(), estimate),
    }
}

/// Plain-text summary table of a fit: fixed effects with standard errors
/// and significance, then deviation variances and fit statistics.
pub fn fit_summary(fit: &FitResult, regions: &RegionSet) -> String {
    let mut rows: Vec<(String, String, String, String, String)> = Vec::new();
    for fe in &fit.fixed_effects {
        let (label, shown) = display_row(&fe.name, fe.estimate);
        let (se_s, z_s, sig) = match fe.se {
            Some(se) if se > 0.0 => {
                let z = fe.estimate / se;
                (format!("{se:.4}"), format!("{z:.2}"), stars(z).to_string())
            }
            _ => ("-".to_string(), "-".to_string(), String::new()),
        };
        rows.push((label, format!("{shown:.4}"), se_s, z_s, sig));
    }
    for comp in Component::ALL {
        // Variance rows only appear for components with a random intercept.
        if !fit.spec.has_random_intercept(comp) {
            continue;
        }
        let tag = comp.tag();
        let value = fit.params.sigma2(comp);
        let floored = fit.variance_at_floor.iter().any(|t| t == tag);
        let label = format!(
            "deviation variance sigma2_{tag}{}",
            if floored { " (at floor)" } else { "" }
        );
        rows.push((label, format!("{value:.4}"), "-".to_string(), "-".to_string(), String::new()));
    }

    let mut out = String::new();
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(
        out,
        "{:<w0$}  {:>10}  {:>8}  {:>7}  {}",
        "term", "estimate", "se(log)", "z", "sig"
    );
    let _ = writeln!(out, "{}", "-".repeat(w0 + 34));
    for (label, est, se, z, sig) in &rows {
        let _ = writeln!(out, "{label:<w0$}  {est:>10}  {se:>8}  {z:>7}  {sig}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "regions:               {}", regions.len());
    let _ = writeln!(out, "modelled observations: {}", fit.n_obs);
    let _ = writeln!(out, "free parameters:       {}", fit.n_free_params);
    let _ = writeln!(out, "log-likelihood:        {:.4}", fit.loglik);
    let _ = writeln!(out, "penalized:             {:.4}", fit.penalized_loglik);
    let _ = writeln!(out, "marginal (Laplace):    {:.4}", fit.marginal_loglik);
    if let Some(aic) = fit.aic_like {
        let _ = writeln!(out, "AIC:                   {aic:.4}");
    }
    let _ = writeln!(
        out,
        "converged:             {} ({} outer rounds, final gradient {:.2e})",
        if fit.converged { "yes" } else { "NO" },
        fit.outer_iters,
        fit.grad_max_norm
    );
    out
}

/// Forecast table: `region_id,name,observed,predicted,lo,hi` plus a TOTAL
/// row.  `observed` may be absent (columns left empty) or hold the actual
/// counts for the forecast day.
pub fn forecast_csv<W: Write>(
    mut w: W,
    regions: &RegionSet,
    fc: &Forecast,
    observed: Option<&[u64]>,
) -> Result<()> {
    writeln!(w, "region_id,name,observed,predicted,lo,hi")?;
    let mut total_pred = 0.0;
    let mut total_obs: u64 = 0;
    for i in 0..regions.len() {
        let obs = observed.map(|o| o[i]);
        total_pred += fc.mean[i];
        if let Some(o) = obs {
            total_obs += o;
        }
        writeln!(
            w,
            "{},{},{},{:.1},{},{}",
            regions.id(i),
            regions.name(i),
            obs.map_or(String::new(), |o| o.to_string()),
            fc.mean[i],
            fc.lo[i],
            fc.hi[i]
        )?;
    }
    writeln!(
        w,
        "TOTAL,,{},{:.1},,",
        if observed.is_some() {
            total_obs.to_string()
        } else {
            String::new()
        },
        total_pred
    )?;
    Ok(())
}

/// One-line comparison of forecast and outcome totals.
pub fn forecast_total_line(fc: &Forecast, observed: Option<&[u64]>) -> String {
    let total_pred: f64 = fc.mean.iter().sum();
    match observed {
        Some(obs) => {
            let total_obs: u64 = obs.iter().sum();
            format!(
                "predicted total {total_pred:.0} vs observed {total_obs} on {}",
                fc.date
            )
        }
        None => format!("predicted total {total_pred:.0} on {}", fc.date),
    }
}

/// Decomposition table: `region_id,name,within,between,endemic`.
pub fn decomposition_csv<W: Write>(
    mut w: W,
    regions: &RegionSet,
    d: &Decomposition,
) -> Result<()> {
    writeln!(w, "region_id,name,within,between,endemic")?;
    for i in 0..regions.len() {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6}",
            regions.id(i),
            regions.name(i),
            d.within[i],
            d.between[i],
            d.endemic[i]
        )?;
    }
    Ok(())
}

/// True when the fit carries a per-region overdispersion vector (the summary
/// table then has one psi row per region).
pub fn has_per_region_overdispersion(fit: &FitResult) -> bool {
    matches!(fit.params.psi, Psi::PerRegion(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountPanel, RegionCovariates};
    use crate::estimation::{fit, FitOptions};
    use crate::forecast::one_step_ahead;
    use crate::graph::{build_adjacency, build_weights, neighbor_order};
    use crate::model::{EndemicTerms, ModelSpec, Overdispersion, WithinTerms};
    use chrono::NaiveDate;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn fitted_world() -> (RegionSet, crate::graph::WeightMatrix, RegionCovariates, CountPanel, FitResult)
    {
        let regions = RegionSet::from_ids(&["A", "B"]).unwrap();
        let adj = build_adjacency(&regions, &[("A".to_string(), "B".to_string())]).unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![0.4, 0.6], vec![0.2, 0.25]).unwrap();
        let panel = CountPanel::new(
            (0..6)
                .map(|d| date("2020-03-01") + chrono::Days::new(d))
                .collect(),
            vec![3, 5, 4, 6, 7, 5, 2, 4, 6, 5, 7, 9],
            2,
        )
        .unwrap();
        let spec = ModelSpec {
            within: Some(WithinTerms {
                random_intercept: false,
            }),
            between: None,
            endemic: Some(EndemicTerms {
                random_intercept: false,
                trend: true,
                trend_quadratic: false,
                log_over65: false,
            }),
            overdispersion: Overdispersion::None,
        };
        let result = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
        (regions, weights, cov, panel, result)
    }

    #[test]
    fn summary_table_lists_natural_scale_terms() {
        let (regions, _, _, _, result) = fitted_world();
        let table = fit_summary(&result, &regions);
        assert!(table.contains("within multiplier exp(alpha_lambda)"));
        assert!(table.contains("endemic level exp(alpha_nu)"));
        assert!(table.contains("daily trend factor exp(beta_nu_t)"));
        assert!(table.contains("log-likelihood"));
        assert!(table.contains("AIC"));
        assert!(table.contains("converged:             yes"));
        // No random intercepts: no variance rows.
        assert!(!table.contains("sigma2_lambda"));
    }

    #[test]
    fn forecast_csv_has_total_row() {
        let (regions, weights, cov, panel, result) = fitted_world();
        let spec = ModelSpec {
            within: Some(WithinTerms {
                random_intercept: false,
            }),
            between: None,
            endemic: Some(EndemicTerms {
                random_intercept: false,
                trend: true,
                trend_quadratic: false,
                log_over65: false,
            }),
            overdispersion: Overdispersion::None,
        };
        let fc = one_step_ahead(&result.params, &spec, &panel, &cov, &weights, 0.8).unwrap();
        let mut buf = Vec::new();
        forecast_csv(&mut buf, &regions, &fc, Some(&[6, 8])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "region_id,name,observed,predicted,lo,hi");
        assert_eq!(lines.len(), 4); // header + 2 regions + TOTAL
        assert!(lines[3].starts_with("TOTAL,,14,"));
        let line = forecast_total_line(&fc, Some(&[6, 8]));
        assert!(line.contains("vs observed 14"), "{line}");
    }

    #[test]
    fn decomposition_csv_is_one_row_per_region() {
        let (regions, _, _, _, _) = fitted_world();
        let d = Decomposition {
            within: vec![0.25, 0.3],
            between: vec![0.05, 0.1],
            endemic: vec![0.7, 0.6],
        };
        let mut buf = Vec::new();
        decomposition_csv(&mut buf, &regions, &d).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("A,A,0.250000,0.050000,0.700000"));
    }

    #[test]
    fn significance_markers_use_the_documented_cutoffs() {
        assert_eq!(stars(3.0), "***");
        assert_eq!(stars(-2.0), "**");
        assert_eq!(stars(1.7), "*");
        assert_eq!(stars(1.0), "");
    }
}
