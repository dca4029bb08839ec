//! Dense symmetric solves with explicit rank diagnostics.
//!
//! The penalized information matrices fitted here are symmetric and, for an
//! identified model, positive definite.  We factor them ourselves instead of
//! going through an opaque decomposition so that near-rank-deficiency can be
//! distinguished from a transient failed pivot: the former is a modelling
//! error (collinear design), the latter is worth one ridge retry.

use nalgebra::{DMatrix, DVector};

/// Outcome of a Cholesky attempt.
pub(crate) enum CholOutcome {
    /// Factor succeeded; `min_pivot` is the smallest diagonal entry of `L`
    /// squared (i.e. the smallest pivot of the LDL^T view).
    Factored(Cholesky),
    /// A pivot came out non-positive at `index`.
    FailedPivot { index: usize, pivot: f64 },
}

/// Lower-triangular Cholesky factor `A = L L^T` with pivot statistics.
pub(crate) struct Cholesky {
    l: DMatrix<f64>,
    pub min_pivot: f64,
    /// Row of the smallest pivot, for diagnostics naming the degenerate slot.
    pub min_pivot_index: usize,
}

/// Relative threshold under which a successful factorization is still
/// declared rank deficient: `min_pivot < RANK_TOL * max(diag(A), 1)`.
pub(crate) const RANK_TOL: f64 = 1e-12;

pub(crate) fn cholesky(a: &DMatrix<f64>) -> CholOutcome {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    let mut min_pivot_index = 0;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return CholOutcome::FailedPivot { index: j, pivot: d };
        }
        if d < min_pivot {
            min_pivot = d;
            min_pivot_index = j;
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / s;
        }
    }
    CholOutcome::Factored(Cholesky {
        l,
        min_pivot,
        min_pivot_index,
    })
}

impl Cholesky {
    /// True when the factorization succeeded numerically but the matrix is
    /// rank deficient for practical purposes.
    pub fn rank_deficient(&self, scale: f64) -> bool {
        self.min_pivot < RANK_TOL * scale.max(1.0)
    }

    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        // forward: L y = b
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= self.l[(i, k)] * x[k];
            }
            x[i] = v / self.l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * x[k];
            }
            x[i] = v / self.l[(i, i)];
        }
        x
    }

    /// Full inverse of `A` (used for posterior covariances and standard
    /// errors; the matrices involved are small).
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.set_column(j, &col);
        }
        // Symmetrize to wash out round-off asymmetry from columnwise solves.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }

    /// log det(A) = 2 * sum log diag(L).
    pub fn log_det(&self) -> f64 {
        let n = self.l.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.l[(i, i)].ln();
        }
        2.0 * acc
    }
}
