//! Panel ingestion, covariates, incidence, and national aggregation.
//!
//! A count panel is a complete region-by-day grid of nonnegative counts over
//! consecutive calendar days.  Ingestion is strict: every cell must be
//! present exactly once, dates must form a single unbroken run, and negative
//! counts are rejected unless clipping is explicitly requested.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{Region, RegionSet};

/// Complete R x T grid of daily counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountPanel {
    dates: Vec<NaiveDate>,
    /// Row-major `[region][day]`.
    counts: Vec<u64>,
    r: usize,
}

impl CountPanel {
    /// Assemble from parts; validates shape and date consecutiveness.
    pub fn new(dates: Vec<NaiveDate>, counts: Vec<u64>, n_regions: usize) -> Result<Self> {
        if dates.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "a count panel needs at least 2 days, got {}",
                dates.len()
            )));
        }
        for w in dates.windows(2) {
            if w[1] != w[0].succ_opt().expect("date overflow") {
                return Err(Error::NonConsecutiveDates {
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        if counts.len() != n_regions * dates.len() {
            return Err(Error::DimensionMismatch(format!(
                "count grid has {} cells, expected {} regions x {} days",
                counts.len(),
                n_regions,
                dates.len()
            )));
        }
        Ok(Self {
            dates,
            counts,
            r: n_regions,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.r
    }

    /// Number of days T.
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn first_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        *self.dates.last().expect("panel has at least two days")
    }

    /// Count for region `r` on day `t` (0-based day index).
    pub fn count(&self, r: usize, t: usize) -> u64 {
        self.counts[r * self.dates.len() + t]
    }

    /// All counts for one region, in day order.
    pub fn region_series(&self, r: usize) -> &[u64] {
        let t = self.dates.len();
        &self.counts[r * t..(r + 1) * t]
    }

    /// Restrict to a subset of region indices (order preserved).
    pub fn subset_regions(&self, idx: &[usize]) -> CountPanel {
        let t = self.dates.len();
        let mut counts = Vec::with_capacity(idx.len() * t);
        for &r in idx {
            counts.extend_from_slice(self.region_series(r));
        }
        CountPanel {
            dates: self.dates.clone(),
            counts,
            r: idx.len(),
        }
    }

    /// Keep only the first `n_days` days (needs at least 2).
    pub fn truncate_days(&self, n_days: usize) -> Result<CountPanel> {
        if n_days < 2 || n_days > self.dates.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot truncate a {}-day panel to {n_days} days",
                self.dates.len()
            )));
        }
        let t = self.dates.len();
        let mut counts = Vec::with_capacity(self.r * n_days);
        for r in 0..self.r {
            counts.extend_from_slice(&self.counts[r * t..r * t + n_days]);
        }
        Ok(CountPanel {
            dates: self.dates[..n_days].to_vec(),
            counts,
            r: self.r,
        })
    }

    /// Raw row-major grid, region by region.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Per-region population share and elderly proportion.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCovariates {
    /// `e_r`: share of national population, strictly positive, sums to 1.
    pub pop_share: Vec<f64>,
    /// `a_r`: proportion aged 65+, in (0, 1).
    pub over65: Vec<f64>,
}

impl RegionCovariates {
    pub fn new(pop_share: Vec<f64>, over65: Vec<f64>) -> Result<Self> {
        if pop_share.len() != over65.len() {
            return Err(Error::DimensionMismatch(format!(
                "pop_share has {} entries, over65 has {}",
                pop_share.len(),
                over65.len()
            )));
        }
        for (i, &e) in pop_share.iter().enumerate() {
            if !e.is_finite() || e <= 0.0 {
                return Err(Error::NonFiniteInput(format!(
                    "pop_share[{i}] = {e} must be finite and > 0"
                )));
            }
        }
        let total: f64 = pop_share.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::NonFiniteInput(format!(
                "population shares sum to {total:.12}, expected 1 within 1e-9"
            )));
        }
        for (i, &a) in over65.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 || a >= 1.0 {
                return Err(Error::NonFiniteInput(format!(
                    "over65[{i}] = {a} must lie strictly between 0 and 1"
                )));
            }
        }
        Ok(Self { pop_share, over65 })
    }

    pub fn len(&self) -> usize {
        self.pop_share.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pop_share.is_empty()
    }
}

/// Ingestion knobs.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Replace negative counts by zero instead of failing; each replacement
    /// is logged at warn level.
    pub clip_negatives_to_zero: bool,
}

#[derive(Debug, Deserialize)]
struct CountRecord {
    date: NaiveDate,
    region_id: String,
    count: i64,
}

/// Read a `date,region_id,count` CSV into a complete panel over `regions`.
pub fn ingest_counts<R: Read>(reader: R, regions: &RegionSet) -> Result<CountPanel> {
    ingest_counts_with(reader, regions, &IngestOptions::default()).map(|(panel, _)| panel)
}

/// [`ingest_counts`] with options; also returns how many cells were clipped.
pub fn ingest_counts_with<R: Read>(
    reader: R,
    regions: &RegionSet,
    opts: &IngestOptions,
) -> Result<(CountPanel, u64)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?.clone();
        let want = ["date", "region_id", "count"];
        let got: Vec<&str> = headers.iter().collect();
        if got != want {
            return Err(Error::SchemaMismatch(format!(
                "counts header must be `date,region_id,count`, got `{}`",
                got.join(",")
            )));
        }
    }

    let mut rows: Vec<(NaiveDate, usize, i64)> = Vec::new();
    for record in rdr.deserialize::<CountRecord>() {
        let rec = record.map_err(|e| Error::SchemaMismatch(format!("bad counts row: {e}")))?;
        let ridx = regions
            .index_of(&rec.region_id)
            .ok_or_else(|| Error::UnknownRegion {
                id: rec.region_id.clone(),
                context: format!("counts file, date {}", rec.date),
            })?;
        rows.push((rec.date, ridx, rec.count));
    }
    if rows.is_empty() {
        return Err(Error::SchemaMismatch("counts file has no data rows".into()));
    }

    let mut dates: Vec<NaiveDate> = rows.iter().map(|r| r.0).collect();
    dates.sort_unstable();
    dates.dedup();
    for w in dates.windows(2) {
        if w[1] != w[0].succ_opt().expect("date overflow") {
            return Err(Error::NonConsecutiveDates {
                prev: w[0],
                next: w[1],
            });
        }
    }
    if dates.len() < 2 {
        return Err(Error::DimensionMismatch(
            "a count panel needs at least 2 days".into(),
        ));
    }

    let t = dates.len();
    let first = dates[0];
    let day_of = |d: NaiveDate| (d - first).num_days() as usize;

    let mut seen = vec![false; regions.len() * t];
    let mut counts = vec![0u64; regions.len() * t];
    let mut clipped = 0u64;
    for (date, ridx, value) in rows {
        let cell = ridx * t + day_of(date);
        if seen[cell] {
            return Err(Error::DuplicateCell {
                region: regions.id(ridx).to_string(),
                date,
            });
        }
        seen[cell] = true;
        counts[cell] = if value < 0 {
            if !opts.clip_negatives_to_zero {
                return Err(Error::NegativeCount {
                    region: regions.id(ridx).to_string(),
                    date,
                    value,
                });
            }
            log::warn!(
                "clipped negative count {value} to 0 for region {} on {date}",
                regions.id(ridx)
            );
            clipped += 1;
            0
        } else {
            value as u64
        };
    }

    if let Some(cell) = seen.iter().position(|&s| !s) {
        let ridx = cell / t;
        let date = first + chrono::Duration::days((cell % t) as i64);
        return Err(Error::MissingCell {
            region: regions.id(ridx).to_string(),
            date,
        });
    }

    Ok((CountPanel::new(dates, counts, regions.len())?, clipped))
}

/// Write a panel back out in the exact ingestion format (day-major rows,
/// regions in set order within each day).
pub fn export_counts<W: Write>(
    panel: &CountPanel,
    regions: &RegionSet,
    writer: W,
) -> Result<()> {
    if panel.n_regions() != regions.len() {
        return Err(Error::DimensionMismatch(format!(
            "panel has {} regions, region set has {}",
            panel.n_regions(),
            regions.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "region_id", "count"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        for r in 0..panel.n_regions() {
            w.write_record([
                date.to_string(),
                regions.id(r).to_string(),
                panel.count(r, t).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CovariateRecord {
    region_id: String,
    pop_share: f64,
    over65: f64,
    name: Option<String>,
}

/// Read a `region_id,pop_share,over65[,name]` CSV.  The row order of this
/// file defines the canonical region order for the whole analysis.
pub fn ingest_covariates<R: Read>(reader: R) -> Result<(RegionSet, RegionCovariates)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?.clone();
        let got: Vec<&str> = headers.iter().collect();
        if got.len() < 3 || got[0] != "region_id" || got[1] != "pop_share" || got[2] != "over65" {
            return Err(Error::SchemaMismatch(format!(
                "covariates header must start with `region_id,pop_share,over65`, got `{}`",
                got.join(",")
            )));
        }
    }
    let mut regions = Vec::new();
    let mut pop_share = Vec::new();
    let mut over65 = Vec::new();
    for record in rdr.deserialize::<CovariateRecord>() {
        let rec = record.map_err(|e| Error::SchemaMismatch(format!("bad covariates row: {e}")))?;
        let name = rec.name.unwrap_or_else(|| rec.region_id.clone());
        regions.push(Region {
            id: rec.region_id,
            name,
        });
        pop_share.push(rec.pop_share);
        over65.push(rec.over65);
    }
    if regions.is_empty() {
        return Err(Error::SchemaMismatch(
            "covariates file has no data rows".into(),
        ));
    }
    Ok((
        RegionSet::new(regions)?,
        RegionCovariates::new(pop_share, over65)?,
    ))
}

/// Per-capita incidence panel `Q[r][t] = Y[r][t] / e_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidencePanel {
    values: Vec<f64>,
    r: usize,
    t: usize,
}

impl IncidencePanel {
    pub fn n_regions(&self) -> usize {
        self.r
    }

    pub fn n_days(&self) -> usize {
        self.t
    }

    pub fn value(&self, r: usize, t: usize) -> f64 {
        self.values[r * self.t + t]
    }
}

/// Scale counts to incidence by each region's population share.
pub fn incidence(panel: &CountPanel, cov: &RegionCovariates) -> Result<IncidencePanel> {
    if panel.n_regions() != cov.len() {
        return Err(Error::DimensionMismatch(format!(
            "panel has {} regions, covariates have {}",
            panel.n_regions(),
            cov.len()
        )));
    }
    let (r, t) = (panel.n_regions(), panel.n_days());
    let mut values = Vec::with_capacity(r * t);
    for i in 0..r {
        let e = cov.pop_share[i];
        for d in 0..t {
            values.push(panel.count(i, d) as f64 / e);
        }
    }
    Ok(IncidencePanel { values, r, t })
}

/// Sum counts over regions, one total per day.
pub fn aggregate_national(panel: &CountPanel) -> Vec<u64> {
    let mut totals = vec![0u64; panel.n_days()];
    for r in 0..panel.n_regions() {
        for (t, total) in totals.iter_mut().enumerate() {
            *total += panel.count(r, t);
        }
    }
    totals
}
