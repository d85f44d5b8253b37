//! Penalized multinomial logistic regression by damped Newton.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct MultinomialOptions {
    /// L2 penalty on every coefficient except the first (intercept) column.
    pub ridge: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Coefficients beyond this magnitude are reported as (quasi-)separation.
    pub separation_bound: f64,
}

impl Default for MultinomialOptions {
    fn default() -> Self {
        Self { ridge: 1e-6, grad_tol: 1e-8, max_iter: 100, separation_bound: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultinomialFit {
    /// `p × M`; column `m` holds the coefficients of category `m + 1` against category 0.
    pub coef: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub penalized_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
    /// Penalized log-likelihood after each iteration.
    pub trace: Vec<f64>,
}

/// Category probabilities `(π_0, ..., π_M)` for linear predictors `(0, η_1, ..., η_M)`.
pub fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(eta.len() + 1);
    out.push((-max).exp());
    out.extend(eta.iter().map(|e| (e - max).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_softmax_denominator(eta: &[f64]) -> f64 {
    linalg::log_sum_exp(std::iter::once(0.0).chain(eta.iter().copied()))
}

struct Objective<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [u8],
    m: usize,
    ridge: f64,
}

impl Objective<'_> {
    fn eta(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        self.x * beta
    }

    fn penalty(&self, beta: &DMatrix<f64>) -> f64 {
        let p = beta.nrows();
        0.5 * self.ridge * (1..p).map(|j| beta.row(j).norm_squared()).sum::<f64>()
    }

    fn value(&self, beta: &DMatrix<f64>) -> f64 {
        let eta = self.eta(beta);
        let mut ll = 0.0;
        let mut row = vec![0.0; self.m];
        for i in 0..self.x.nrows() {
            for m in 0..self.m {
                row[m] = eta[(i, m)];
            }
            let y = self.y[i] as usize;
            ll += if y == 0 { 0.0 } else { row[y - 1] } - log_softmax_denominator(&row);
        }
        ll - self.penalty(beta)
    }

    /// Gradient (stacked by category) and negative Hessian.
    fn derivatives(&self, beta: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, p, m) = (self.x.nrows(), self.x.ncols(), self.m);
        let eta = self.eta(beta);
        let mut probs = DMatrix::zeros(n, m);
        let mut row = vec![0.0; m];
        for i in 0..n {
            for c in 0..m {
                row[c] = eta[(i, c)];
            }
            let pr = softmax_with_reference(&row);
            for c in 0..m {
                probs[(i, c)] = pr[c + 1];
            }
        }
        let mut resid = -probs.clone();
        for (i, &y) in self.y.iter().enumerate() {
            if y > 0 {
                resid[(i, y as usize - 1)] += 1.0;
            }
        }
        let grad_mat = self.x.transpose() * resid;
        let mut grad = DVector::zeros(p * m);
        let mut info = DMatrix::zeros(p * m, p * m);
        for a in 0..m {
            for j in 0..p {
                grad[a * p + j] = grad_mat[(j, a)] - if j > 0 { self.ridge * beta[(j, a)] } else { 0.0 };
            }
            for b in a..m {
                let w = DVector::from_fn(n, |i, _| {
                    let (pa, pb) = (probs[(i, a)], probs[(i, b)]);
                    if a == b {
                        pa * (1.0 - pa)
                    } else {
                        -pa * pb
                    }
                });
                let mut xw = self.x.clone();
                for (i, mut r) in xw.row_iter_mut().enumerate() {
                    r *= w[i];
                }
                let block = self.x.transpose() * xw;
                info.view_mut((a * p, b * p), (p, p)).copy_from(&block);
                if a != b {
                    info.view_mut((b * p, a * p), (p, p)).copy_from(&block.transpose());
                }
            }
            for j in 1..p {
                info[(a * p + j, a * p + j)] += self.ridge;
            }
        }
        linalg::symmetrize(&mut info);
        (grad, info)
    }
}

/// Fits `log(π_m / π_0) = x'β_m`, `m = 1..num_categories-1`, to outcomes `y ∈ 0..num_categories`.
///
/// Non-convergence is reported through `converged`, not as an error.
pub fn fit_multinomial(x: &DMatrix<f64>, y: &[u8], num_categories: usize, options: &MultinomialOptions) -> Result<MultinomialFit> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} design rows but {} outcomes", x.nrows(), y.len())));
    }
    if num_categories < 2 || y.iter().any(|&v| v as usize >= num_categories) {
        return Err(Error::InvalidConfig("outcome outside the category range".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let m = num_categories - 1;
    let p = x.ncols();
    let obj = Objective { x, y, m, ridge: options.ridge };
    let mut beta = DMatrix::zeros(p, m);
    let mut value = obj.value(&beta);
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let (mut grad, mut info) = obj.derivatives(&beta);
    while iterations < options.max_iter {
        if grad.amax() < options.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match linalg::cholesky(&info) {
            Ok(c) => c.solve(&grad),
            // flat directions (e.g. a category without events): regularize the step
            Err(_) => linalg::cholesky(&(&info + DMatrix::identity(p * m, p * m) * 1e-8))?.solve(&grad),
        };
        // near the optimum the predicted gain drops below the rounding error of
        // the objective; the full Newton step is then taken on a tie
        let noise = 1e3 * f64::EPSILON * value.abs().max(1.0);
        let tiny = 0.5 * step.dot(&grad) < noise;
        let step = DMatrix::from_fn(p, m, |j, a| step[a * p + j]);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let v = obj.value(&cand);
            if v >= value || (tiny && t == 1.0 && v >= value - noise) {
                beta = cand;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(value);
        if !accepted {
            break;
        }
        (grad, info) = obj.derivatives(&beta);
    }
    if !converged && grad.amax() < options.grad_tol {
        converged = true;
    }
    let cov = linalg::cholesky(&info).map(|c| c.inverse()).unwrap_or_else(|_| DMatrix::from_element(p * m, p * m, f64::NAN));
    let se = DMatrix::from_fn(p, m, |j, a| cov[(a * p + j, a * p + j)].max(0.0).sqrt());
    let mut counts = vec![0usize; num_categories];
    for &v in y {
        counts[v as usize] += 1;
    }
    let separation = counts.iter().any(|&c| c == 0) || beta.amax() > options.separation_bound;
    Ok(MultinomialFit { coef: beta, se, penalized_loglik: value, iterations, converged, separation, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_values() {
        assert_eq!(softmax_with_reference(&[0.0, 0.0, 0.0]), vec![0.25; 4]);
        let p = softmax_with_reference(&[1.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[1], e / (3.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 1.0 / (3.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.4754, epsilon = 1e-4);
        assert_abs_diff_eq!(p[2], 0.1749, epsilon = 1e-4);
    }

    #[test]
    fn binary_covariate_matches_log_cross_ratios() {
        // counts[x][category]
        let counts = [[500usize, 60, 30, 10], [300, 90, 25, 20]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (x, row) in counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    rows.extend([1.0, x as f64]);
                    y.push(c as u8);
                }
            }
        }
        let x = DMatrix::from_row_slice(y.len(), 2, &rows);
        let fit = fit_multinomial(&x, &y, 4, &MultinomialOptions::default()).unwrap();
        assert!(fit.converged && !fit.separation);
        for m in 1..4 {
            let intercept = (counts[0][m] as f64 / counts[0][0] as f64).ln();
            let slope = (counts[1][m] as f64 * counts[0][0] as f64 / (counts[1][0] as f64 * counts[0][m] as f64)).ln();
            assert_abs_diff_eq!(fit.coef[(0, m - 1)], intercept, epsilon = 1e-6);
            assert_abs_diff_eq!(fit.coef[(1, m - 1)], slope, epsilon = 1e-6);
        }
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs());
        }
    }

    #[test]
    fn no_events_drive_intercepts_down() {
        let x = DMatrix::from_fn(200, 2, |i, j| if j == 0 { 1.0 } else { (i % 7) as f64 / 7.0 });
        let y = vec![0u8; 200];
        let fit = fit_multinomial(&x, &y, 4, &MultinomialOptions::default()).unwrap();
        assert!(fit.separation);
        for m in 0..3 {
            assert!(fit.coef[(0, m)] < -15.0);
            let p = softmax_with_reference(&[fit.coef[(0, 0)], fit.coef[(0, 1)], fit.coef[(0, 2)]]);
            assert!(p[m + 1] < 1e-6);
        }
    }
}
