//! Error type shared across the crate.

use chrono::NaiveDate;
use thiserror::Error;

/// Everything that can go wrong while building graphs, ingesting data,
/// evaluating likelihoods, fitting, or forecasting.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// A record references a region id that is not in the region set.
    #[error("unknown region id `{id}`{}", context_suffix(.context))]
    UnknownRegion { id: String, context: String },

    /// A border list entry pairs a region with itself.
    #[error("self-loop border entry for region `{id}`")]
    SelfLoop { id: String },

    /// A count cell is negative and clipping was not requested.
    #[error("negative count {value} for region `{region}` on {date}")]
    NegativeCount {
        region: String,
        date: NaiveDate,
        value: i64,
    },

    /// The (region, date) grid has a hole.
    #[error("missing count for region `{region}` on {date}")]
    MissingCell { region: String, date: NaiveDate },

    /// A (region, date) pair appears more than once.
    #[error("duplicate count for region `{region}` on {date}")]
    DuplicateCell { region: String, date: NaiveDate },

    /// The date column does not form a single run of consecutive days.
    #[error("dates are not consecutive: {prev} is followed by {next}")]
    NonConsecutiveDates { prev: NaiveDate, next: NaiveDate },

    /// Input file violates the documented schema (bad header, bad field, ...).
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// Two objects that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A numeric input (parameter, covariate, ...) is NaN or infinite,
    /// or violates a documented domain restriction.
    #[error("non-finite or out-of-domain input: {0}")]
    NonFiniteInput(String),

    /// The analytic gradient evaluated to NaN or infinity.
    #[error("non-finite gradient in component `{0}`")]
    NonFiniteGradient(String),

    /// A random-effect variance is non-positive while its deviations are free.
    #[error("variance sigma2_{component} = {value} is too small to penalize free deviations")]
    ZeroVariance { component: &'static str, value: f64 },

    /// The penalized information matrix is rank deficient (collinear design,
    /// or a component with no data support) or failed to factor even after
    /// the ridge retry.
    #[error("singular penalized information matrix: {0}")]
    SingularInformation(String),

    /// A Newton step or line-search objective evaluated to NaN.
    #[error("non-finite step in inner maximization at iteration {iter}")]
    NonFiniteStep { iter: usize },

    /// A simulated mean exceeded the explosion cap.
    #[error("simulated mean {mu:.3e} for region `{region}` on day {day} exceeds the cap {cap:.3e}")]
    ExplosionGuard {
        region: String,
        day: usize,
        mu: f64,
        cap: f64,
    },

    /// A count quantile scan did not terminate within the hard iteration cap.
    #[error("quantile scan for mean {mu:.3e} exceeded {cap} terms")]
    QuantileOverflow { mu: f64, cap: u64 },

    /// Wrapped CSV-level failure (I/O or malformed records).
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Wrapped I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
