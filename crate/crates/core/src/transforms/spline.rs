//! Natural cubic spline basis.
//!
//! Built the usual way: a cubic B-spline basis on the boundary and interior
//! knots, first column dropped (the model carries its own intercept), then
//! projected onto the null space of the second-derivative constraints at both
//! boundary knots. Outside the boundary knots the basis continues linearly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORDER: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "SplineKnots", into = "SplineKnots")]
pub struct SplineBasis {
    interior: Vec<f64>,
    boundary: (f64, f64),
    /// Full knot vector with repeated boundary knots.
    knots: Vec<f64>,
    /// Maps the (first-column-dropped) B-spline basis onto the natural basis.
    projection: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplineKnots {
    interior: Vec<f64>,
    boundary: (f64, f64),
}

impl From<SplineKnots> for SplineBasis {
    fn from(k: SplineKnots) -> Self {
        SplineBasis::build(k.interior, k.boundary)
    }
}

impl From<SplineBasis> for SplineKnots {
    fn from(b: SplineBasis) -> Self {
        SplineKnots { interior: b.interior, boundary: b.boundary }
    }
}

impl PartialEq for SplineBasis {
    fn eq(&self, other: &Self) -> bool {
        self.interior == other.interior && self.boundary == other.boundary
    }
}

impl SplineBasis {
    /// Basis with explicit knots. Interior knots must lie strictly inside the boundary.
    pub fn new(interior: Vec<f64>, boundary: (f64, f64)) -> Result<Self> {
        let (lo, hi) = boundary;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!("bad boundary knots ({lo}, {hi})")));
        }
        if interior.iter().any(|&k| !(k > lo && k < hi)) || interior.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("interior knots must be strictly increasing inside the boundary".into()));
        }
        Ok(Self::build(interior, boundary))
    }

    /// `df` columns, interior knots at equally spaced quantiles of `values`,
    /// boundary knots at their range.
    pub fn from_data(values: &[f64], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(Error::InvalidConfig("spline df must be at least 1".into()));
        }
        let mut sorted: Vec<f64> = values.to_vec();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = match (sorted.first(), sorted.last()) {
            (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
            _ => return Err(Error::InvalidConfig("spline needs at least two distinct values".into())),
        };
        let mut interior: Vec<f64> = (1..df).map(|j| quantile(&sorted, j as f64 / df as f64)).collect();
        interior.retain(|&k| k > lo && k < hi);
        interior.dedup();
        if interior.len() + 1 != df {
            return Err(Error::InvalidConfig(format!(
                "cannot place {} distinct interior knots in the data",
                df - 1
            )));
        }
        Self::new(interior, (lo, hi))
    }

    fn build(interior: Vec<f64>, boundary: (f64, f64)) -> Self {
        let mut knots = vec![boundary.0; ORDER];
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(boundary.1, ORDER));
        let n_bs = knots.len() - ORDER;
        // second derivatives at both boundaries, first column dropped
        let mut constraint = DMatrix::zeros(2, n_bs - 1);
        for (row, x) in [boundary.0, boundary.1].into_iter().enumerate() {
            let d2 = bspline_derivative(&knots, x, ORDER, 2);
            for j in 1..n_bs {
                constraint[(row, j - 1)] = d2[j];
            }
        }
        let projection = null_space(&constraint);
        Self { interior, boundary, knots, projection }
    }

    pub fn df(&self) -> usize {
        self.projection.ncols()
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.boundary;
        let raw = if x < lo {
            let v = self.raw_basis(lo, 0);
            let d = self.raw_basis(lo, 1);
            v + d * (x - lo)
        } else if x > hi {
            let v = self.raw_basis(hi, 0);
            let d = self.raw_basis(hi, 1);
            v + d * (x - hi)
        } else {
            self.raw_basis(x, 0)
        };
        (self.projection.transpose() * raw).iter().copied().collect()
    }

    fn raw_basis(&self, x: f64, deriv: usize) -> DVector<f64> {
        let full = bspline_derivative(&self.knots, x, ORDER, deriv);
        DVector::from_iterator(full.len() - 1, full.into_iter().skip(1))
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Values of all B-spline basis functions of the given order at `x`.
/// The right boundary belongs to the last non-empty knot span.
fn bspline_basis(knots: &[f64], x: f64, order: usize) -> Vec<f64> {
    let n_spans = knots.len() - 1;
    let last = knots[knots.len() - 1];
    let span = if x >= last {
        (0..n_spans).rev().find(|&i| knots[i] < knots[i + 1]).unwrap_or(0)
    } else {
        (0..n_spans).find(|&i| knots[i] <= x && x < knots[i + 1]).unwrap_or(0)
    };
    let mut b: Vec<f64> = (0..n_spans).map(|i| if i == span { 1.0 } else { 0.0 }).collect();
    for k in 2..=order {
        let len = knots.len() - k;
        let mut next = vec![0.0; len];
        for i in 0..len {
            let mut v = 0.0;
            let d1 = knots[i + k - 1] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * b[i];
            }
            let d2 = knots[i + k] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + k] - x) / d2 * b[i + 1];
            }
            next[i] = v;
        }
        b = next;
    }
    b
}

/// `deriv`-th derivative of the B-spline basis of the given order.
fn bspline_derivative(knots: &[f64], x: f64, order: usize, deriv: usize) -> Vec<f64> {
    if deriv == 0 {
        return bspline_basis(knots, x, order);
    }
    let lower = bspline_derivative(knots, x, order - 1, deriv - 1);
    let len = knots.len() - order;
    let scale = (order - 1) as f64;
    (0..len)
        .map(|i| {
            let mut v = 0.0;
            let d1 = knots[i + order - 1] - knots[i];
            if d1 > 0.0 {
                v += lower[i] / d1;
            }
            let d2 = knots[i + order] - knots[i + 1];
            if d2 > 0.0 {
                v -= lower[i + 1] / d2;
            }
            scale * v
        })
        .collect()
}

/// Orthonormal basis (as columns) of `{v : C v = 0}`.
fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let candidates = (0..c.nrows())
        .map(|i| c.row(i).transpose())
        .chain((0..n).map(|j| DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })));
    let rank = c.nrows();
    for cand in candidates {
        let mut v = cand.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * cand.norm().max(1.0) {
            basis.push(v / norm);
        }
        if basis.len() == n {
            break;
        }
    }
    let cols: Vec<DVector<f64>> = basis.into_iter().skip(rank).collect();
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> SplineBasis {
        SplineBasis::new(vec![-12.0, -7.0, -3.0], (-19.0, 0.0)).unwrap()
    }

    /// Textbook natural cubic spline basis from truncated powers:
    /// `1, x, d_k(x) - d_{K-1}(x)` with `d_k = ((x-ξ_k)³₊ - (x-ξ_K)³₊)/(ξ_K - ξ_k)`.
    fn truncated_power_basis(x: f64, knots: &[f64]) -> Vec<f64> {
        let kk = knots.len();
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |k: usize| (cube(x - knots[k]) - cube(x - knots[kk - 1])) / (knots[kk - 1] - knots[k]);
        let mut out = vec![1.0, x];
        for k in 0..kk - 2 {
            out.push(d(k) - d(kk - 2));
        }
        out
    }

    fn fitted(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        let yv = DVector::from_column_slice(y);
        let xtx = x.transpose() * &x;
        let beta = xtx.cholesky().unwrap().solve(&(x.transpose() * yv));
        (x * beta).iter().copied().collect()
    }

    #[test]
    fn matches_truncated_power_construction_in_regression() {
        let grid: Vec<f64> = (0..=190).map(|i| -19.0 + i as f64 * 0.1).collect();
        let data: Vec<f64> = grid.iter().map(|&u| (u / 4.0).sin() + 0.02 * u * u).collect();
        let b = SplineBasis::from_data(&grid, 4).unwrap();
        assert_eq!(b.df(), 4);
        let mut knots = vec![b.boundary_knots().0];
        knots.extend_from_slice(b.interior_knots());
        knots.push(b.boundary_knots().1);
        let ours: Vec<Vec<f64>> = grid
            .iter()
            .map(|&u| std::iter::once(1.0).chain(b.eval(u)).collect())
            .collect();
        let textbook: Vec<Vec<f64>> = grid.iter().map(|&u| truncated_power_basis(u, &knots)).collect();
        let f1 = fitted(&ours, &data);
        let f2 = fitted(&textbook, &data);
        let worst = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "max fitted-value difference {worst}");
    }

    #[test]
    fn linear_beyond_boundaries() {
        let b = basis();
        for (x0, x1, x2) in [(2.0, 5.0, 11.0), (-25.0, -30.0, -41.0)] {
            let (v0, v1, v2) = (b.eval(x0), b.eval(x1), b.eval(x2));
            for j in 0..b.df() {
                let slope1 = (v1[j] - v0[j]) / (x1 - x0);
                let slope2 = (v2[j] - v1[j]) / (x2 - x1);
                assert!((slope1 - slope2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn continuous_first_derivative_at_knots() {
        let b = basis();
        let h = 1e-4;
        let mut points = vec![-19.0, 0.0];
        points.extend_from_slice(b.interior_knots());
        for x in points {
            let (l2, l, c, r, r2) = (b.eval(x - 2.0 * h), b.eval(x - h), b.eval(x), b.eval(x + h), b.eval(x + 2.0 * h));
            for j in 0..b.df() {
                // second-order one-sided differences
                let left = (3.0 * c[j] - 4.0 * l[j] + l2[j]) / (2.0 * h);
                let right = (-3.0 * c[j] + 4.0 * r[j] - r2[j]) / (2.0 * h);
                assert!((left - right).abs() < 1e-6, "derivative jump at {x}: {left} vs {right}");
                assert!((c[j] - 0.5 * (l[j] + r[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn second_derivative_vanishes_outside() {
        let b = basis();
        let h = 1e-3;
        for x in [-19.5, -25.0, 0.5, 3.0] {
            let (l, c, r) = (b.eval(x - h), b.eval(x), b.eval(x + h));
            for j in 0..b.df() {
                assert!(((r[j] - 2.0 * c[j] + l[j]) / (h * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn intercept_model_reproduces_constant() {
        let b = basis();
        let grid: Vec<f64> = (0..40).map(|i| -19.0 + i as f64 * 0.5).collect();
        let rows: Vec<Vec<f64>> = grid.iter().map(|&u| std::iter::once(1.0).chain(b.eval(u)).collect()).collect();
        let y = vec![3.25; grid.len()];
        for f in fitted(&rows, &y) {
            assert!((f - 3.25).abs() < 1e-10);
        }
    }

    #[test]
    fn serde_round_trip_rebuilds_projection() {
        let b = basis();
        let json = serde_json::to_string(&b).unwrap();
        let back: SplineBasis = serde_json::from_str(&json).unwrap();
        assert_eq!(b.eval(-4.2), back.eval(-4.2));
    }

    #[test]
    fn quantile_knots() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&v, 0.25), 3.0);
        assert!(SplineBasis::from_data(&[1.0, 1.0, 1.0], 4).is_err());
    }
}
