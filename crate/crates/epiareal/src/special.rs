//! Small special-function helpers on top of `statrs`.
//!
//! Count likelihood work needs `lgamma(y + k) - lgamma(k)` (and the digamma /
//! trigamma analogues) for nonnegative integer `y`.  For small `y` the exact
//! finite sums are both faster and more accurate than two special-function
//! calls; for large `y` we fall back to `statrs` (trigamma is implemented
//! here, since `statrs` does not export it).

use statrs::function::gamma::{digamma, ln_gamma};

/// Crossover between exact finite sums and special-function differences.
const SUM_CUTOFF: u64 = 64;

/// `lgamma(k + y) - lgamma(k)` for integer `y >= 0`, `k > 0`.
pub(crate) fn ln_gamma_ratio(k: f64, y: u64) -> f64 {
    if y < SUM_CUTOFF {
        let mut acc = 0.0;
        for j in 0..y {
            acc += (k + j as f64).ln();
        }
        acc
    } else {
        ln_gamma(k + y as f64) - ln_gamma(k)
    }
}

/// `digamma(k + y) - digamma(k)` for integer `y >= 0`, `k > 0`.
pub(crate) fn digamma_diff(k: f64, y: u64) -> f64 {
    if y < SUM_CUTOFF {
        let mut acc = 0.0;
        for j in 0..y {
            acc += 1.0 / (k + j as f64);
        }
        acc
    } else {
        digamma(k + y as f64) - digamma(k)
    }
}

/// `trigamma(k + y) - trigamma(k)` for integer `y >= 0`, `k > 0`.
/// Always nonpositive because trigamma decreases on the positive axis.
pub(crate) fn trigamma_diff(k: f64, y: u64) -> f64 {
    if y < SUM_CUTOFF {
        let mut acc = 0.0;
        for j in 0..y {
            let d = k + j as f64;
            acc -= 1.0 / (d * d);
        }
        acc
    } else {
        trigamma(k + y as f64) - trigamma(k)
    }
}

/// Trigamma via the standard recurrence plus asymptotic tail.
///
/// For x below 8 the recurrence `psi'(x) = psi'(x+1) + 1/x^2` shifts the
/// argument up; the asymptotic expansion then leaves an error below 1e-13.
pub(crate) fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma domain is x > 0, got {x}");
    let mut acc = 0.0;
    let mut z = x;
    while z < 8.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    // 1/z + 1/(2 z^2) + sum_n B_{2n} / z^{2n+1}
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let bern = 1.0 / 6.0
        + inv2
            * (-1.0 / 30.0
                + inv2
                    * (1.0 / 42.0
                        + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0))));
    acc + inv * (1.0 + inv * (0.5 + inv * bern))
}
