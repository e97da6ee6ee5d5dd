//! Cubic B-spline bases with a second-order difference penalty, sum-to-zero
//! centering and effective degrees of freedom.
//!
//! A term with basis dimension `K` uses `K − 4` interior knots at quantiles
//! of the covariate, boundary knots at its minimum and maximum, and three
//! extra knots on each side spaced like the outermost interval. The penalty
//! takes second differences of the coefficients divided by the spacing of
//! the Greville abscissae (rescaled by their mean spacing), so its null
//! space is exactly the constant and linear functions of `x`. With equally
//! spaced knots it reduces to the plain `D₂ᵀD₂` of P-splines.
//!
//! Centering reparameterizes the `K` raw coefficients as `Zγ` with `Z` the
//! `K × (K − 1)` orthogonal complement of the basis column sums, so every
//! centered column sums to zero over the training points.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
pub const DEFAULT_K: usize = 10;
pub const MIN_K: usize = DEGREE + 1;

/// One smooth term's basis, constraint and penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisBlock {
    pub covariate: String,
    pub k: usize,
    /// Full knot vector, length `k + 4`.
    pub knots: Vec<f64>,
    /// Training range; evaluation clamps to it.
    pub lower: f64,
    pub upper: f64,
    /// `k × (k − 1)` centering reparameterization, row-major rows.
    pub constraint: Vec<Vec<f64>>,
    /// `(k − 1) × (k − 1)` centered penalty.
    pub penalty: Vec<Vec<f64>>,
}

/// Type-7 quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn interior_knots(sorted: &[f64], m: usize) -> Vec<f64> {
    (1..=m)
        .map(|i| quantile_sorted(sorted, i as f64 / (m + 1) as f64))
        .collect()
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Knot vector for `k` cubic B-splines over the given sorted data.
fn place_knots(sorted: &[f64], k: usize) -> Vec<f64> {
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let m = k - MIN_K;
    let mut inner = vec![lo];
    inner.extend(interior_knots(sorted, m));
    inner.push(hi);
    if !strictly_increasing(&inner) {
        // heavy ties: place quantiles on the distinct values instead
        let mut distinct = sorted.to_vec();
        distinct.dedup();
        inner = vec![lo];
        inner.extend(interior_knots(&distinct, m));
        inner.push(hi);
    }
    let h_left = inner[1] - inner[0];
    let h_right = inner[inner.len() - 1] - inner[inner.len() - 2];
    let mut knots = Vec::with_capacity(k + DEGREE + 1);
    for s in (1..=DEGREE).rev() {
        knots.push(lo - s as f64 * h_left);
    }
    knots.extend_from_slice(&inner);
    for s in 1..=DEGREE {
        knots.push(hi + s as f64 * h_right);
    }
    knots
}

/// Values of all `k = knots.len() − 4` cubic B-splines at `x`; `x` must lie
/// in `[knots[3], knots[k]]`.
pub fn bspline_row(knots: &[f64], x: f64) -> Vec<f64> {
    let k = knots.len() - DEGREE - 1;
    // span i with knots[i] <= x < knots[i + 1], i in [DEGREE, k - 1]
    let mut span = DEGREE;
    while span < k - 1 && x >= knots[span + 1] {
        span += 1;
    }
    let mut n = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut row = vec![0.0; k];
    row[span - DEGREE..=span].copy_from_slice(&n);
    row
}

/// Greville abscissae: the coefficients that reproduce `f(x) = x`.
pub fn greville(knots: &[f64]) -> Vec<f64> {
    let k = knots.len() - DEGREE - 1;
    (0..k)
        .map(|j| knots[j + 1..=j + DEGREE].iter().sum::<f64>() / DEGREE as f64)
        .collect()
}

/// `(k − 2) × k` second divided-difference operator over the Greville
/// abscissae, scaled by their mean spacing.
pub fn difference_operator(knots: &[f64]) -> DMatrix<f64> {
    let g = greville(knots);
    let k = g.len();
    let mean_h = (g[k - 1] - g[0]) / (k - 1) as f64;
    let mut d = DMatrix::zeros(k - 2, k);
    for r in 0..k - 2 {
        let h0 = g[r + 1] - g[r];
        let h1 = g[r + 2] - g[r + 1];
        d[(r, r)] = mean_h / h0;
        d[(r, r + 1)] = -mean_h / h0 - mean_h / h1;
        d[(r, r + 2)] = mean_h / h1;
    }
    d
}

/// Raw (uncentered) penalty `DᵀD`.
pub fn raw_penalty(knots: &[f64]) -> DMatrix<f64> {
    let d = difference_operator(knots);
    d.transpose() * d
}

/// Householder complement of `c`: `k × (k − 1)` with orthonormal columns
/// orthogonal to `c`.
fn sum_to_zero_complement(c: &[f64]) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let alpha = if c[0] >= 0.0 { -norm } else { norm };
    let mut u: Vec<f64> = c.to_vec();
    u[0] -= alpha;
    let uu: f64 = u.iter().map(|v| v * v).sum();
    let mut z = DMatrix::zeros(k, k - 1);
    for i in 0..k {
        for j in 1..k {
            let id = if i == j { 1.0 } else { 0.0 };
            z[(i, j - 1)] = id - 2.0 * u[i] * u[j] / uu;
        }
    }
    z
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Builds the basis for one covariate from its (complete) training values.
pub fn build_basis(covariate: &str, x: &[f64], k: usize) -> Result<BasisBlock> {
    if k < MIN_K {
        return Err(Error::InvalidArgument(format!(
            "basis dimension must be at least {MIN_K}, got {k}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "covariate {covariate:?} has non-finite values"
        )));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = {
        let mut d = sorted.clone();
        d.dedup();
        d.len()
    };
    if distinct < k {
        return Err(Error::TooFewDistinct {
            needed: k,
            found: distinct,
        });
    }
    let knots = place_knots(&sorted, k);
    let lower = sorted[0];
    let upper = sorted[sorted.len() - 1];
    let mut col_sums = vec![0.0; k];
    for &v in x {
        for (s, b) in col_sums.iter_mut().zip(bspline_row(&knots, v)) {
            *s += b;
        }
    }
    let z = sum_to_zero_complement(&col_sums);
    let s = raw_penalty(&knots);
    let sc = z.transpose() * &s * &z;
    let sc = (&sc + sc.transpose()) * 0.5;
    Ok(BasisBlock {
        covariate: covariate.to_string(),
        k,
        knots,
        lower,
        upper,
        constraint: to_rows(&z),
        penalty: to_rows(&sc),
    })
}

impl BasisBlock {
    /// Number of centered columns, `k − 1`.
    pub fn dim(&self) -> usize {
        self.k - 1
    }

    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.constraint)
    }

    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.penalty)
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    /// Raw B-spline values at `x` (clamped to the training range).
    pub fn raw_row(&self, x: f64) -> Vec<f64> {
        bspline_row(&self.knots, self.clamp(x))
    }

    /// Centered basis values at `x` (clamped to the training range).
    pub fn centered_row(&self, x: f64) -> Vec<f64> {
        let raw = self.raw_row(x);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, &b) in raw.iter().enumerate() {
            if b != 0.0 {
                for (o, zij) in out.iter_mut().zip(&self.constraint[i]) {
                    *o += b * zij;
                }
            }
        }
        out
    }

    /// `n × (k − 1)` centered design block.
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(x.len(), self.dim());
        for (i, &v) in x.iter().enumerate() {
            for (j, b) in self.centered_row(v).into_iter().enumerate() {
                m[(i, j)] = b;
            }
        }
        m
    }

    /// `s(x) = b(x)ᵀγ` for centered coefficients `gamma`.
    pub fn eval(&self, gamma: &[f64], x: f64) -> f64 {
        self.centered_row(x).iter().zip(gamma).map(|(b, g)| b * g).sum()
    }
}

/// Diagonal of the influence matrix `(XᵀWX + S_λ)⁻¹XᵀWX` of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Influence {
    pub diag: Vec<f64>,
    pub converged: bool,
}

/// Per-term Edf: the influence diagonal summed over each term's columns.
pub fn effective_df(term_columns: &[Range<usize>], influence: &Influence) -> Result<Vec<f64>> {
    if !influence.converged {
        return Err(Error::NotConvergedModel);
    }
    term_columns
        .iter()
        .map(|r| {
            if r.end > influence.diag.len() {
                Err(Error::InvalidArgument(format!(
                    "term columns {r:?} exceed influence length {}",
                    influence.diag.len()
                )))
            } else {
                Ok(influence.diag[r.clone()].iter().sum())
            }
        })
        .collect()
}

/// Rank used for a smooth term's Wald test: Edf rounded up, ignoring an
/// excess below 0.05, between 1 and `k − 1`.
pub fn estimated_rank(edf: f64, k: usize) -> usize {
    // a term within the linear tolerance of 1 keeps rank 1
    let r = (edf - 0.05).ceil().max(1.0) as usize;
    r.min(k - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn grid(n: usize) -> Vec<f64> {
        (1..=n).map(|i| i as f64).collect()
    }

    #[test]
    fn partition_of_unity() {
        let x = grid(100);
        let b = build_basis("x", &x, 10).unwrap();
        for v in x.iter().copied().chain([1.37, 55.5, 99.99]) {
            let s: f64 = b.raw_row(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={v} sum={s}");
        }
    }

    #[test]
    fn centered_columns_sum_to_zero() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let b = build_basis("x", &x, 10).unwrap();
        let d = b.design(&x);
        for j in 0..d.ncols() {
            assert!(d.column(j).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn constant_and_linear_coefficients_are_unpenalized() {
        let b = build_basis("x", &grid(100), 10).unwrap();
        let s = raw_penalty(&b.knots);
        let ones = DVector::from_element(10, 1.0);
        let lin = DVector::from_iterator(10, (0..10).map(|i| i as f64));
        assert!((ones.transpose() * &s * &ones)[(0, 0)].abs() < 1e-12);
        assert!((lin.transpose() * &s * &lin)[(0, 0)].abs() < 1e-12);
        let wiggle = DVector::from_iterator(10, (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        assert!((wiggle.transpose() * &s * &wiggle)[(0, 0)] > 1.0);
    }

    #[test]
    fn greville_reproduces_identity() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 / 20.0).exp()).collect();
        let b = build_basis("x", &x, 8).unwrap();
        let g = greville(&b.knots);
        for v in [x[0], 3.3, 100.0, x[199]] {
            let fx: f64 = b.raw_row(v).iter().zip(&g).map(|(a, c)| a * c).sum();
            assert!((fx - v).abs() < 1e-9 * v.abs().max(1.0), "{fx} vs {v}");
        }
        // and Greville-linear coefficients are unpenalized even with skewed knots
        let s = raw_penalty(&b.knots);
        let gv = DVector::from_vec(g);
        let q = (gv.transpose() * &s * &gv)[(0, 0)];
        assert!(q.abs() < 1e-12 * gv.norm_squared(), "{q}");
    }

    #[test]
    fn centered_penalty_is_psd_with_one_dim_null_space() {
        let x: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.731).sin() * 4.0).collect();
        let b = build_basis("x", &x, 10).unwrap();
        let s = b.penalty_matrix();
        assert_eq!(s, s.transpose());
        let eig = s.symmetric_eigen();
        let max = eig.eigenvalues.max();
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10 * max));
        let null = eig.eigenvalues.iter().filter(|&&e| e.abs() < 1e-9 * max).count();
        assert_eq!(null, 1);
    }

    #[test]
    fn rejects_small_k_and_few_values() {
        assert!(matches!(build_basis("x", &grid(50), 3), Err(Error::InvalidArgument(_))));
        let x = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            build_basis("x", &x, 5),
            Err(Error::TooFewDistinct { needed: 5, found: 4 })
        ));
    }

    #[test]
    fn heavy_ties_still_give_increasing_knots() {
        let mut x = vec![0.0; 400];
        x.extend((1..=12).map(|i| i as f64));
        let b = build_basis("x", &x, 10).unwrap();
        assert!(strictly_increasing(&b.knots));
        let s: f64 = b.raw_row(0.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_clamps_to_training_range() {
        let b = build_basis("x", &grid(60), 6).unwrap();
        assert_eq!(b.centered_row(1e6), b.centered_row(60.0));
        assert_eq!(b.centered_row(-5.0), b.centered_row(1.0));
    }

    #[test]
    fn edf_bookkeeping() {
        let inf = Influence {
            diag: vec![1.0, 1.0, 0.5, 0.25, 0.25],
            converged: true,
        };
        let edf = effective_df(std::slice::from_ref(&(2..5)), &inf).unwrap();
        assert_eq!(edf, vec![1.0]);
        let bad = Influence {
            converged: false,
            ..inf
        };
        assert!(matches!(effective_df(std::slice::from_ref(&(2..5)), &bad), Err(Error::NotConvergedModel)));
    }

    #[test]
    fn rank_rounds_edf_up() {
        assert_eq!(estimated_rank(9.000, 10), 9);
        assert_eq!(estimated_rank(2.987, 10), 3);
        assert_eq!(estimated_rank(5.592, 10), 6);
        assert_eq!(estimated_rank(3.0000001, 10), 3);
        assert_eq!(estimated_rank(0.4, 10), 1);
        assert_eq!(estimated_rank(1.0004, 10), 1);
        assert_eq!(estimated_rank(9.2, 10), 9);
    }
}
