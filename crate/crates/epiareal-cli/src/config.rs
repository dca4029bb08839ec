//! Run configuration: one TOML file drives every command, with command-line
//! flags overriding individual values.
//!
//! Relative paths inside the file are resolved against the directory the
//! file lives in, so a bundled dataset can be run from anywhere.  Dates are
//! written as quoted strings (`start_date = "2020-02-24"`).

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epiareal::{FitOptions, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Input file locations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Daily counts, `date,region_id,count`.
    pub counts: PathBuf,
    /// Region covariates, `region_id,pop_share,over65[,name]`; row order
    /// fixes the region order everywhere.
    pub covariates: PathBuf,
    /// Border pairs, `from,to`.
    pub borders: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            counts: "counts.csv".into(),
            covariates: "covariates.csv".into(),
            borders: "borders.csv".into(),
        }
    }
}

/// How border adjacency turns into the neighbourhood weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    /// Largest neighbour order that still receives weight.
    pub max_order: u32,
    /// Normalize each receiving region's weights to sum to one.
    pub normalize: bool,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            max_order: 2,
            normalize: true,
        }
    }
}

/// Count-file handling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Replace negative counts (reporting corrections) by zero instead of
    /// rejecting the file.
    pub clip_negatives_to_zero: bool,
}

/// Where artifacts are written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

/// Controls for `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Central interval level in (0, 1).
    pub level: f64,
    /// Optional counts CSV holding the forecast day's observed values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<PathBuf>,
    /// Fitted-model file; defaults to `fit.json` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_file: Option<PathBuf>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            level: 0.8,
            observed: None,
            fit_file: None,
        }
    }
}

/// Controls for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Panel length in days, including the seeded first day.
    pub days: usize,
    /// Date of the first day (quoted, e.g. `"2020-02-24"`).
    pub start_date: NaiveDate,
    /// First-day count used for every region when `y0` is absent.
    pub y0_each: u64,
    /// Explicit first-day counts, one per region in covariate order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<u64>>,
    /// Parameter file: a params document or a saved `fit.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_file: Option<PathBuf>,
    /// Largest mean tolerated before the run aborts.
    pub mu_cap: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            days: 30,
            start_date: NaiveDate::from_ymd_opt(2020, 2, 24).expect("valid date"),
            y0_each: 1,
            y0: None,
            params_file: None,
            mu_cap: 1e9,
        }
    }
}

/// Everything a run needs, from one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master RNG seed for `simulate`.
    pub seed: u64,
    pub paths: Paths,
    pub weights: WeightsConfig,
    pub ingest: IngestConfig,
    pub output: OutputConfig,
    pub model: ModelSpec,
    pub fit: FitOptions,
    pub predict: PredictConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            weights: WeightsConfig::default(),
            ingest: IngestConfig::default(),
            output: OutputConfig::default(),
            model: ModelSpec::default(),
            fit: FitOptions::default(),
            predict: PredictConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: RunConfig,
    base: PathBuf,
}

impl LoadedConfig {
    /// Read `path`; when `None`, try `config.toml` in the working directory
    /// and fall back to built-in defaults if it does not exist.
    pub fn load(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
        let (file, required) = match path {
            Some(p) => (p.to_path_buf(), true),
            None => (PathBuf::from("config.toml"), false),
        };
        if !file.exists() {
            if required {
                return Err(CliError::Invalid(format!(
                    "config file {} does not exist",
                    file.display()
                )));
            }
            return Ok(LoadedConfig {
                cfg: RunConfig::default(),
                base: PathBuf::from("."),
            });
        }
        let text = std::fs::read_to_string(&file).map_err(|e| {
            CliError::Invalid(format!("cannot read config {}: {e}", file.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            CliError::Invalid(format!("config {}: {e}", file.display()))
        })?;
        let base = file
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(LoadedConfig { cfg, base })
    }

    /// Resolve a path from the config file against the file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Output directory: the flag wins (taken as typed, relative to the
    /// working directory); otherwise the config value.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match flag {
            Some(p) => p.to_path_buf(),
            None => self.resolve(&self.cfg.output.dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epiareal::{BetweenTerms, Init, Overdispersion};

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // And once more: serialize the reparse and compare the text itself.
        assert_eq!(text, toml::to_string_pretty(&back).unwrap());
    }

    #[test]
    fn handwritten_config_round_trips() {
        let text = r#"
seed = 99

[paths]
counts = "data/counts.csv"
covariates = "data/covariates.csv"
borders = "data/borders.csv"

[weights]
max_order = 1
normalize = false

[ingest]
clip_negatives_to_zero = true

[output]
dir = "results"

[model]
overdispersion = "per_region"

[model.within]
random_intercept = true

[model.between]
random_intercept = false
log_pop_share = true
use_counts = true

[model.endemic]
random_intercept = true
trend = true
trend_quadratic = false
log_over65 = true

[fit]
max_outer_iters = 7
max_inner_iters = 11
tol_params = 1e-5
tol_loglik = 1e-7
sigma2_floor = 1e-8
init = "zeros"

[predict]
level = 0.9
observed = "next.csv"

[simulate]
days = 14
start_date = "2021-06-01"
y0_each = 3
y0 = [1, 2, 3]
params_file = "params.json"
mu_cap = 1000000.0
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.weights.max_order, 1);
        assert!(!cfg.weights.normalize);
        assert!(cfg.ingest.clip_negatives_to_zero);
        assert_eq!(cfg.model.overdispersion, Overdispersion::PerRegion);
        assert_eq!(
            cfg.model.between,
            Some(BetweenTerms {
                random_intercept: false,
                log_pop_share: true,
                use_counts: true,
            })
        );
        assert_eq!(cfg.fit.max_outer_iters, 7);
        assert_eq!(cfg.fit.init, Init::Zeros);
        assert_eq!(cfg.predict.level, 0.9);
        assert_eq!(cfg.simulate.y0, Some(vec![1, 2, 3]));
        assert_eq!(
            cfg.simulate.start_date,
            NaiveDate::from_ymd_opt(2021, 6, 1).unwrap()
        );

        let serialized = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&serialized).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sections_may_be_omitted() {
        let cfg: RunConfig = toml::from_str("seed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.paths, Paths::default());
        assert_eq!(cfg.model, ModelSpec::default());
        let empty: RunConfig = toml::from_str("").unwrap();
        assert_eq!(empty, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("sede = 5\n").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = toml::from_str::<RunConfig>("[outputs]\ndir = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("outputs"), "{err}");
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[paths]\ncounts = \"sub/c.csv\"\n").unwrap();
        let lc = LoadedConfig::load(Some(&file)).unwrap();
        assert_eq!(
            lc.resolve(&lc.cfg.paths.counts),
            dir.path().join("sub/c.csv")
        );
        // Absolute paths pass through untouched.
        assert_eq!(lc.resolve(Path::new("/abs/x.csv")), PathBuf::from("/abs/x.csv"));
        // The flag overrides the configured output directory verbatim.
        assert_eq!(lc.out_dir(Some(Path::new("elsewhere"))), PathBuf::from("elsewhere"));
        assert_eq!(lc.out_dir(None), dir.path().join("out"));
    }

    #[test]
    fn missing_explicit_config_is_an_error_but_missing_default_is_not() {
        let err = LoadedConfig::load(Some(Path::new("/nonexistent/nope.toml"))).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
        // No config.toml in a scratch working directory: defaults apply.
        let lc = LoadedConfig {
            cfg: RunConfig::default(),
            base: PathBuf::from("."),
        };
        assert_eq!(lc.cfg.predict.level, 0.8);
    }
}
