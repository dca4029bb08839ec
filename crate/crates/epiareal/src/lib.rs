//! Endemic-epidemic modelling of areal count time series.
//!
//! The crate fits a three-component mean model to daily counts observed on a
//! set of regions: a within-region autoregression on yesterday's count, a
//! between-region term driven by neighbouring regions' lagged incidence
//! through an adjacency-order weight matrix, and an endemic drift scaled by
//! population share.  Counts are negative binomial (Poisson when the
//! overdispersion is zero), region-level heterogeneity enters through
//! Gaussian random intercepts, and estimation maximizes a penalized
//! likelihood with Laplace-approximate variance updates.
//!
//! Typical flow:
//!
//! 1. build the region graph ([`graph`]) and ingest data ([`data`]),
//! 2. describe the model ([`model::ModelSpec`]) and fit ([`estimation::fit`]),
//! 3. decompose fitted means and forecast one step ahead ([`forecast`]).

mod error;
mod linalg;
mod special;

pub mod data;
pub mod estimation;
pub mod forecast;
pub mod graph;
pub mod model;
pub mod report;

pub use error::{Error, Result};

pub use estimation::{fit, penalized_loglik, FitOptions, FitResult, FixedEffect, Init};
pub use forecast::{
    decompose, interval_coverage, nb_quantile, one_step_ahead, simulate, CoverageOptions,
    CoverageResult, Decomposition, Forecast, SimOptions,
};

pub use data::{CountPanel, IncidencePanel, RegionCovariates};
pub use graph::{
    build_adjacency, build_weights, neighbor_order, Adjacency, NeighborOrders, Region, RegionSet,
    WeightMatrix, UNREACHABLE,
};
pub use report::{decomposition_csv, fit_summary, forecast_csv, forecast_total_line};
pub use model::{
    mean, predictors, BetweenTerms, Component, ComponentMeans, EndemicTerms, ModelSpec,
    Overdispersion, Params, Predictors, Psi, WithinTerms,
};
pub use model::likelihood::{
    is_loglik_guarded, loglik_gradient, nb_loglik, panel_loglik, Gradient, ParamLayout,
    GUARDED_LOGLIK,
};
