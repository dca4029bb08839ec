//! Saved artifacts: the fitted-model document, the bare parameter document,
//! and atomic file writes.
//!
//! Every output file is written to a temporary file in the destination
//! directory and renamed into place, so an interrupted or failing command
//! never leaves a partial file behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epiareal::{FitResult, ModelSpec, Params, RegionSet};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Schema tag of a saved fit.
pub const FIT_SCHEMA: &str = "epiareal-fit-v1";
/// Schema tag of a bare parameter set (for `simulate`).
pub const PARAMS_SCHEMA: &str = "epiareal-params-v1";

/// A fitted model as written to `fit.json`: self-describing (the result
/// embeds its model structure) plus the region order and panel shape it was
/// estimated on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema: String,
    /// Region ids in estimation order; downstream commands refuse data with
    /// a different region set.
    pub region_ids: Vec<String>,
    /// Days in the fitted panel.
    pub n_days: usize,
    /// First date of the fitted panel.
    pub first_date: NaiveDate,
    pub fit: FitResult,
}

impl FitDocument {
    pub fn new(
        regions: &RegionSet,
        n_days: usize,
        first_date: NaiveDate,
        fit: FitResult,
    ) -> FitDocument {
        FitDocument {
            schema: FIT_SCHEMA.to_string(),
            region_ids: regions.ids().map(str::to_string).collect(),
            n_days,
            first_date,
            fit,
        }
    }
}

/// Model structure plus parameters, enough to simulate from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub schema: String,
    pub region_ids: Vec<String>,
    pub spec: ModelSpec,
    pub params: Params,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{what} {}: {e}", path.display())))
}

/// Load and schema-check a `fit.json`.  The schema tag is checked before
/// the full decode, so a file from a different version fails with its tag,
/// not with a missing-field puzzle.
pub fn load_fit(path: &Path) -> Result<FitDocument, CliError> {
    let probe: serde_json::Value = read_json(path, "fitted-model file")?;
    match probe.get("schema").and_then(|s| s.as_str()) {
        Some(FIT_SCHEMA) => serde_json::from_value(probe)
            .map_err(|e| CliError::Schema(format!("fitted-model file {}: {e}", path.display()))),
        Some(other) => Err(CliError::Schema(format!(
            "{} has schema `{other}`, this build reads `{FIT_SCHEMA}`",
            path.display()
        ))),
        None => Err(CliError::Schema(format!(
            "{} has no `schema` field",
            path.display()
        ))),
    }
}

/// Load simulation parameters from either a params document or a saved fit.
pub fn load_params(path: &Path) -> Result<ParamsDocument, CliError> {
    let probe: serde_json::Value = read_json(path, "parameter file")?;
    match probe.get("schema").and_then(|s| s.as_str()) {
        Some(PARAMS_SCHEMA) => read_json(path, "parameter file"),
        Some(FIT_SCHEMA) => {
            let doc = load_fit(path)?;
            Ok(ParamsDocument {
                schema: PARAMS_SCHEMA.to_string(),
                region_ids: doc.region_ids,
                spec: doc.fit.spec,
                params: doc.fit.params,
            })
        }
        Some(other) => Err(CliError::Schema(format!(
            "{} has schema `{other}`, expected `{PARAMS_SCHEMA}` or `{FIT_SCHEMA}`",
            path.display()
        ))),
        None => Err(CliError::Schema(format!(
            "{} has no `schema` field",
            path.display()
        ))),
    }
}

/// Refuse documents whose region list differs from the loaded data.
pub fn check_regions(doc_ids: &[String], regions: &RegionSet, path: &Path) -> Result<(), CliError> {
    let data_ids: Vec<&str> = regions.ids().collect();
    if doc_ids.len() != data_ids.len() {
        return Err(CliError::Schema(format!(
            "{} was made for {} regions, the covariates file defines {}",
            path.display(),
            doc_ids.len(),
            data_ids.len()
        )));
    }
    for (i, (d, g)) in doc_ids.iter().zip(&data_ids).enumerate() {
        if d != g {
            return Err(CliError::Schema(format!(
                "{} region order differs from the covariates file at position {i}: `{d}` vs `{g}`",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Serialize a document as stable, human-diffable JSON.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Invalid(format!("cannot serialize output: {e}")))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Write `bytes` to `dir/name` atomically (temp file + rename).
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Invalid(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let path = dir.join(name);
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| CliError::Invalid(format!("cannot write in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| CliError::Invalid(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(&path)
        .map_err(|e| CliError::Invalid(format!("cannot replace {}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use epiareal::{
        fit, build_adjacency, build_weights, neighbor_order, CountPanel, EndemicTerms,
        FitOptions, Overdispersion, RegionCovariates, WithinTerms,
    };

    fn tiny_fit() -> (RegionSet, FitDocument) {
        let regions = RegionSet::from_ids(&["A", "B"]).unwrap();
        let adj = build_adjacency(
            &regions,
            &[("A".to_string(), "B".to_string())],
        )
        .unwrap();
        let weights = build_weights(&neighbor_order(&adj), 2, true);
        let cov = RegionCovariates::new(vec![0.4, 0.6], vec![0.2, 0.25]).unwrap();
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let panel = CountPanel::new(
            (0..6).map(|d| start + chrono::Days::new(d)).collect(),
            vec![3, 4, 5, 4, 6, 5, 2, 3, 4, 5, 4, 6],
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
                trend: false,
                trend_quadratic: false,
                log_over65: false,
            }),
            overdispersion: Overdispersion::None,
        };
        let result = fit(&spec, &panel, &cov, &weights, &FitOptions::default()).unwrap();
        let doc = FitDocument::new(&regions, panel.n_days(), panel.first_date(), result);
        (regions, doc)
    }

    #[test]
    fn fit_document_round_trips_and_loads_as_params() {
        let (_, doc) = tiny_fit();
        let dir = tempfile::tempdir().unwrap();
        let bytes = to_json_bytes(&doc).unwrap();
        let path = write_atomic(dir.path(), "fit.json", &bytes).unwrap();

        let back = load_fit(&path).unwrap();
        assert_eq!(back.region_ids, doc.region_ids);
        assert_eq!(back.fit.spec, doc.fit.spec);
        assert_eq!(
            back.fit.params.alpha_nu.to_bits(),
            doc.fit.params.alpha_nu.to_bits()
        );

        // The same file also serves as a parameter source for simulation.
        let params = load_params(&path).unwrap();
        assert_eq!(params.spec, doc.fit.spec);
        assert_eq!(params.region_ids, doc.region_ids);
    }

    #[test]
    fn wrong_schema_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_atomic(
            dir.path(),
            "odd.json",
            b"{\"schema\": \"epiareal-fit-v999\"}\n",
        )
        .unwrap();
        let err = load_fit(&path).unwrap_err();
        assert!(err.to_string().contains("epiareal-fit-v999"), "{err}");
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("epiareal-fit-v999"), "{err}");
        let no_schema = write_atomic(dir.path(), "none.json", b"{}\n").unwrap();
        let err = load_params(&no_schema).unwrap_err();
        assert!(err.to_string().contains("no `schema` field"), "{err}");
    }

    #[test]
    fn region_check_reports_the_first_difference() {
        let (regions, doc) = tiny_fit();
        check_regions(&doc.region_ids, &regions, Path::new("fit.json")).unwrap();

        let other = RegionSet::from_ids(&["A", "C"]).unwrap();
        let err = check_regions(&doc.region_ids, &other, Path::new("fit.json")).unwrap_err();
        assert!(err.to_string().contains("position 1"), "{err}");
        assert!(err.to_string().contains("`B` vs `C`"), "{err}");

        let fewer = RegionSet::from_ids(&["A"]).unwrap();
        let err = check_regions(&doc.region_ids, &fewer, Path::new("fit.json")).unwrap_err();
        assert!(err.to_string().contains("2 regions"), "{err}");
    }

    #[test]
    fn atomic_write_replaces_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.txt", b"one").unwrap();
        write_atomic(dir.path(), "a.txt", b"two").unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.txt")).unwrap(), b"two");
        // No temp litter left behind.
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["a.txt".to_string()]);
    }
}
