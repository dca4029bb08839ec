//! The five commands: fit, predict, decompose, simulate, graph-check.
//!
//! Each command loads what it needs through the shared [`World`] loader,
//! computes every output byte first, and only then writes files (atomically),
//! so a failing run leaves no partial artifacts.

use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epiareal::data::{ingest_counts_with, ingest_covariates, export_counts, IngestOptions};
use epiareal::graph::parse_borders;
use epiareal::{
    build_adjacency, build_weights, decompose, fit, fit_summary, forecast_csv,
    forecast_total_line, neighbor_order, one_step_ahead, simulate, Adjacency, CountPanel,
    decomposition_csv, NeighborOrders, RegionCovariates, RegionSet, SimOptions, WeightMatrix,
};

use crate::artifacts::{
    check_regions, load_fit, load_params, to_json_bytes, write_atomic, FitDocument,
};
use crate::config::LoadedConfig;
use crate::CliError;

/// Region set, covariates, and graph structures shared by every command.
pub struct World {
    pub regions: RegionSet,
    pub cov: RegionCovariates,
    pub adjacency: Adjacency,
    pub orders: NeighborOrders,
    pub weights: WeightMatrix,
}

fn open(path: &Path, what: &str) -> Result<File, CliError> {
    File::open(path)
        .map_err(|e| CliError::Invalid(format!("cannot open {what} {}: {e}", path.display())))
}

/// Load covariates (fixing the region order) and the border graph.
pub fn load_world(lc: &LoadedConfig) -> Result<World, CliError> {
    let cov_path = lc.resolve(&lc.cfg.paths.covariates);
    let (regions, cov) = ingest_covariates(open(&cov_path, "covariates file")?)?;
    let borders_path = lc.resolve(&lc.cfg.paths.borders);
    let borders = parse_borders(open(&borders_path, "border list")?)?;
    let adjacency = build_adjacency(&regions, &borders)?;
    let orders = neighbor_order(&adjacency);
    let weights = build_weights(&orders, lc.cfg.weights.max_order, lc.cfg.weights.normalize);
    Ok(World {
        regions,
        cov,
        adjacency,
        orders,
        weights,
    })
}

fn load_panel(
    lc: &LoadedConfig,
    regions: &RegionSet,
    clip_flag: bool,
) -> Result<CountPanel, CliError> {
    let path = lc.resolve(&lc.cfg.paths.counts);
    let opts = IngestOptions {
        clip_negatives_to_zero: clip_flag || lc.cfg.ingest.clip_negatives_to_zero,
    };
    let (panel, clipped) = ingest_counts_with(open(&path, "counts file")?, regions, &opts)?;
    if clipped > 0 {
        log::info!("clipped {clipped} negative count(s) to zero");
    }
    Ok(panel)
}

fn default_fit_path(lc: &LoadedConfig, out_dir: &Path, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match &lc.cfg.predict.fit_file {
        Some(p) => lc.resolve(p),
        None => out_dir.join("fit.json"),
    }
}

/// Fit the configured model and write `fit.json` plus `table1.txt`.
///
/// Exit 0 when converged, 2 when the iteration budget ran out (the files are
/// still written so the run can be inspected).
pub fn cmd_fit(
    lc: &LoadedConfig,
    out_dir: &Path,
    max_outer_iters: Option<usize>,
    clip_negatives: bool,
    quiet: bool,
) -> Result<i32, CliError> {
    let world = load_world(lc)?;
    let panel = load_panel(lc, &world.regions, clip_negatives)?;
    let mut opts = lc.cfg.fit;
    if let Some(n) = max_outer_iters {
        opts.max_outer_iters = n;
    }
    let result = fit(&lc.cfg.model, &panel, &world.cov, &world.weights, &opts)?;
    let converged = result.converged;
    let outer_iters = result.outer_iters;

    let doc = FitDocument::new(&world.regions, panel.n_days(), panel.first_date(), result);
    let table = fit_summary(&doc.fit, &world.regions);
    let json = to_json_bytes(&doc)?;
    write_atomic(out_dir, "fit.json", &json)?;
    write_atomic(out_dir, "table1.txt", table.as_bytes())?;

    if !quiet {
        print!("{table}");
    }
    if converged {
        Ok(0)
    } else {
        log::warn!("no convergence within {outer_iters} round(s); wrote the last iterate");
        Ok(2)
    }
}

/// Extract the forecast day's observed counts from a counts CSV.
fn observed_for(
    path: &Path,
    regions: &RegionSet,
    date: NaiveDate,
) -> Result<Vec<u64>, CliError> {
    let (panel, _) = ingest_counts_with(
        open(path, "observed counts file")?,
        regions,
        &IngestOptions::default(),
    )?;
    let day = panel
        .dates()
        .iter()
        .position(|d| *d == date)
        .ok_or_else(|| {
            CliError::Invalid(format!(
                "observed file {} covers {}..{} but not the forecast day {date}",
                path.display(),
                panel.first_date(),
                panel.last_date()
            ))
        })?;
    Ok((0..regions.len()).map(|i| panel.count(i, day)).collect())
}

/// Forecast the day after the panel ends and write `forecast.csv`.
pub fn cmd_predict(
    lc: &LoadedConfig,
    out_dir: &Path,
    fit_file: Option<&Path>,
    observed: Option<&Path>,
    level: Option<f64>,
    quiet: bool,
) -> Result<i32, CliError> {
    let fit_path = default_fit_path(lc, out_dir, fit_file);
    let doc = load_fit(&fit_path)?;
    let world = load_world(lc)?;
    check_regions(&doc.region_ids, &world.regions, &fit_path)?;
    let panel = load_panel(lc, &world.regions, false)?;

    let level = level.unwrap_or(lc.cfg.predict.level);
    let fc = one_step_ahead(
        &doc.fit.params,
        &doc.fit.spec,
        &panel,
        &world.cov,
        &world.weights,
        level,
    )?;

    let observed_path = observed
        .map(Path::to_path_buf)
        .or_else(|| lc.cfg.predict.observed.as_ref().map(|p| lc.resolve(p)));
    let obs = observed_path
        .map(|p| observed_for(&p, &world.regions, fc.date))
        .transpose()?;

    let mut csv = Vec::new();
    forecast_csv(&mut csv, &world.regions, &fc, obs.as_deref())?;
    write_atomic(out_dir, "forecast.csv", &csv)?;

    if !quiet {
        println!("{}", forecast_total_line(&fc, obs.as_deref()));
    }
    Ok(0)
}

/// Average within/between/endemic shares per region, to `decomposition.csv`.
pub fn cmd_decompose(
    lc: &LoadedConfig,
    out_dir: &Path,
    fit_file: Option<&Path>,
) -> Result<i32, CliError> {
    let fit_path = default_fit_path(lc, out_dir, fit_file);
    let doc = load_fit(&fit_path)?;
    let world = load_world(lc)?;
    check_regions(&doc.region_ids, &world.regions, &fit_path)?;
    let panel = load_panel(lc, &world.regions, false)?;

    let shares = decompose(
        &doc.fit.params,
        &doc.fit.spec,
        &panel,
        &world.cov,
        &world.weights,
    )?;
    let mut csv = Vec::new();
    decomposition_csv(&mut csv, &world.regions, &shares)?;
    write_atomic(out_dir, "decomposition.csv", &csv)?;
    Ok(0)
}

/// Simulate a synthetic panel and write it in the exact ingestion format.
pub fn cmd_simulate(
    lc: &LoadedConfig,
    out_dir: &Path,
    params_file: Option<&Path>,
    days: Option<usize>,
    start_date: Option<NaiveDate>,
    seed: Option<u64>,
) -> Result<i32, CliError> {
    let params_path = match params_file {
        Some(p) => p.to_path_buf(),
        None => match &lc.cfg.simulate.params_file {
            Some(p) => lc.resolve(p),
            None => {
                return Err(CliError::Invalid(
                    "simulate needs a parameter file: pass --params-file or set \
                     [simulate] params_file"
                        .to_string(),
                ))
            }
        },
    };
    let doc = load_params(&params_path)?;
    let world = load_world(lc)?;
    check_regions(&doc.region_ids, &world.regions, &params_path)?;

    let r = world.regions.len();
    let y0 = match &lc.cfg.simulate.y0 {
        Some(y0) => {
            if y0.len() != r {
                return Err(CliError::Invalid(format!(
                    "[simulate] y0 lists {} first-day counts for {r} regions",
                    y0.len()
                )));
            }
            y0.clone()
        }
        None => vec![lc.cfg.simulate.y0_each; r],
    };
    let opts = SimOptions {
        days: days.unwrap_or(lc.cfg.simulate.days),
        y0,
        seed: seed.unwrap_or(lc.cfg.seed),
        start_date: start_date.unwrap_or(lc.cfg.simulate.start_date),
        mu_cap: lc.cfg.simulate.mu_cap,
    };
    let panel = simulate(
        &doc.params,
        &doc.spec,
        &world.regions,
        &world.cov,
        &world.weights,
        &opts,
    )?;

    let mut csv = Vec::new();
    export_counts(&panel, &world.regions, &mut csv)?;
    write_atomic(out_dir, "counts.csv", &csv)?;
    log::info!(
        "simulated {} regions over {} days from seed {}",
        r,
        opts.days,
        opts.seed
    );
    Ok(0)
}

/// Validate the region graph and print neighbour-order statistics.
pub fn cmd_graph_check(lc: &LoadedConfig) -> Result<i32, CliError> {
    let world = load_world(lc)?;
    let r = world.regions.len();
    let max_order = lc.cfg.weights.max_order;

    println!("regions: {r}");
    println!("undirected borders: {}", world.adjacency.n_borders());

    let degrees: Vec<usize> = (0..r)
        .map(|i| world.adjacency.neighbors(i).count())
        .collect();
    let isolated: Vec<&str> = (0..r)
        .filter(|&i| degrees[i] == 0)
        .map(|i| world.regions.id(i))
        .collect();
    let min = degrees.iter().min().copied().unwrap_or(0);
    let max = degrees.iter().max().copied().unwrap_or(0);
    let mean = degrees.iter().sum::<usize>() as f64 / r.max(1) as f64;
    println!("border neighbours per region: min {min}, mean {mean:.2}, max {max}");
    if isolated.is_empty() {
        println!("isolated regions: none");
    } else {
        println!("isolated regions: {}", isolated.join(", "));
    }

    let (hist, disconnected) = world.orders.histogram(max_order);
    let total_pairs = r * (r.saturating_sub(1)) / 2;
    let within_reach: usize = hist.iter().sum();
    let beyond = total_pairs - within_reach - disconnected;
    println!("region pairs by neighbour order (weights reach order {max_order}):");
    for (order, n) in hist.iter().enumerate().skip(1) {
        println!("  order {order}: {n}");
    }
    println!("  beyond order {max_order}: {beyond}");
    println!("  disconnected: {disconnected}");

    let weighted_rows = (0..r)
        .filter(|&i| world.weights.into_row(i).iter().any(|w| *w > 0.0))
        .count();
    println!(
        "weight matrix: normalize {}, {} of {r} regions receive neighbour signal",
        lc.cfg.weights.normalize, weighted_rows
    );
    Ok(0)
}
