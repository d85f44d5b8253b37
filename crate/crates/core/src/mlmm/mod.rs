//! Multivariate linear mixed-effects model.
//!
//! For patient `i`, `y = Xβ + Zb + ε` with `b ~ N(0, D)` (`D` is `Kq × Kq`)
//! and `ε` independent across days with `K × K` within-day covariance `R`.

mod fit;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, EventType, PatientRecord};
use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix};
use crate::transforms::{build_design_for_cells, Cell, DesignMatrices, DesignSpec, SplineBasis, TimeAxis};

pub use fit::{fit, FitOptions};

/// Minimum number of patients in a retrospective stratum.
pub const MIN_STRATUM: usize = 25;

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "stratum", rename_all = "lowercase")]
pub enum FitMode {
    Prospective,
    Retrospective(EventType),
}

impl FitMode {
    /// Patients used by this fit, with their time axis.
    pub fn select<'a>(&self, dataset: &'a CohortDataset) -> Vec<(&'a PatientRecord, TimeAxis)> {
        dataset
            .patients
            .iter()
            .filter_map(|p| match self {
                FitMode::Prospective => Some((p, TimeAxis::Prospective)),
                FitMode::Retrospective(m) => match p.outcome.kind() {
                    Some(k) if k == *m => Some((p, TimeAxis::Retrospective { event_day: p.last_day() })),
                    _ => None,
                },
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    #[serde(with = "linalg::nan_as_null")]
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    #[serde(with = "linalg::nan_as_null")]
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_patients: usize,
    pub n_observations: usize,
    /// Log-likelihood after each iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmmFit {
    pub version: u32,
    pub mode: FitMode,
    pub spec: DesignSpec,
    pub coefficients: Vec<Coefficient>,
    #[serde(with = "serde_matrix")]
    pub d: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub r: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
}

impl MlmmFit {
    /// A fit with given parameters (no estimation diagnostics).
    pub fn from_parameters(mode: FitMode, spec: DesignSpec, beta: &[f64], d: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (k, p, q) = (spec.num_biomarkers(), spec.p(), spec.q());
        if beta.len() != k * p || d.shape() != (k * q, k * q) || r.shape() != (k, k) {
            return Err(Error::DimensionMismatch(format!(
                "expected beta {}, D {}x{}, R {k}x{k}",
                k * p,
                k * q,
                k * q
            )));
        }
        let coefficients = spec
            .column_names()
            .into_iter()
            .zip(beta)
            .map(|(name, &estimate)| Coefficient { name, estimate, se: f64::NAN })
            .collect();
        Ok(Self {
            version: FIT_FORMAT_VERSION,
            mode,
            spec,
            coefficients,
            d,
            r,
            diagnostics: FitDiagnostics {
                loglik: f64::NAN,
                iterations: 0,
                converged: true,
                n_patients: 0,
                n_observations: 0,
                trace: Vec::new(),
            },
        })
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_iterator(self.coefficients.len(), self.coefficients.iter().map(|c| c.estimate))
    }

    pub fn beta_se(&self) -> DVector<f64> {
        DVector::from_iterator(self.coefficients.len(), self.coefficients.iter().map(|c| c.se))
    }

    pub fn stratum(&self) -> Option<EventType> {
        match self.mode {
            FitMode::Prospective => None,
            FitMode::Retrospective(m) => Some(m),
        }
    }

    pub fn ensure_converged(&self) -> Result<&Self> {
        if self.diagnostics.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { what: "mixed-model fit".into(), iterations: self.diagnostics.iterations })
        }
    }

    /// Model-implied Gaussian over `cells` of `patient` on the given axis.
    pub fn joint(&self, patient: &PatientRecord, cells: &[Cell], axis: TimeAxis) -> Result<GaussianBelief> {
        marginal_joint(self, &build_design_for_cells(patient, cells, axis, &self.spec))
    }
}

/// Spline knots from the observed time values of the patients `mode` selects.
pub fn default_spec(dataset: &CohortDataset, mode: FitMode, df: usize) -> Result<DesignSpec> {
    let mut times = Vec::new();
    for (p, axis) in mode.select(dataset) {
        for (day, _, _) in p.observed_cells(p.last_day()) {
            times.push(axis.time(day));
        }
    }
    let basis = match SplineBasis::from_data(&times, df) {
        Ok(b) => b,
        // heavily tied day values: fall back to quantiles of the distinct values
        Err(Error::InvalidConfig(_)) => {
            times.sort_by(f64::total_cmp);
            times.dedup();
            SplineBasis::from_data(&times, df)?
        }
        Err(e) => return Err(e),
    };
    Ok(DesignSpec::new(basis, &dataset.schema.covariates, dataset.schema.biomarker_names()))
}

/// Gaussian over labelled cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub labels: Vec<Cell>,
}

impl GaussianBelief {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, cell: Cell) -> Option<usize> {
        self.labels.iter().position(|c| *c == cell)
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[(i, i)]
    }
}

/// `N(Xβ, Z D Z' + R ⊗ I_days)` over the rows of `design`.
pub fn marginal_joint(fit: &MlmmFit, design: &DesignMatrices) -> Result<GaussianBelief> {
    let beta = fit.beta();
    if design.x.ncols() != beta.len() || design.z.ncols() != fit.d.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {}+{} columns, fit expects {}+{}",
            design.x.ncols(),
            design.z.ncols(),
            beta.len(),
            fit.d.nrows()
        )));
    }
    let mean = &design.x * beta;
    let mut cov = &design.z * &fit.d * design.z.transpose();
    for (i, ci) in design.cells.iter().enumerate() {
        for (j, cj) in design.cells.iter().enumerate() {
            if ci.day == cj.day {
                cov[(i, j)] += fit.r[(ci.biomarker, cj.biomarker)];
            }
        }
    }
    linalg::symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov, labels: design.cells.clone() })
}

/// Largest tolerated condition number of the observed block.
pub const MAX_CONDITION: f64 = 1e12;

/// Distribution of the unobserved labels of `belief` given `observed`.
pub fn condition_on_past(belief: &GaussianBelief, observed: &[(Cell, f64)]) -> Result<GaussianBelief> {
    let mut obs_idx = Vec::with_capacity(observed.len());
    for (cell, _) in observed {
        let i = belief
            .position(*cell)
            .ok_or_else(|| Error::DimensionMismatch(format!("cell (day {}, biomarker {}) not in belief", cell.day, cell.biomarker)))?;
        obs_idx.push(i);
    }
    let free: Vec<usize> = (0..belief.len()).filter(|i| !obs_idx.contains(i)).collect();
    let labels: Vec<Cell> = free.iter().map(|&i| belief.labels[i]).collect();
    let mu_f = DVector::from_iterator(free.len(), free.iter().map(|&i| belief.mean[i]));
    let s_ff = belief.cov.select_rows(&free).select_columns(&free);
    if obs_idx.is_empty() {
        return Ok(GaussianBelief { mean: mu_f, cov: s_ff, labels });
    }
    let s_oo = belief.cov.select_rows(&obs_idx).select_columns(&obs_idx);
    let condition = linalg::condition_number(&s_oo);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularObservedBlock { condition });
    }
    let chol = linalg::cholesky(&s_oo).map_err(|_| Error::SingularObservedBlock { condition })?;
    let s_of = belief.cov.select_rows(&obs_idx).select_columns(&free);
    let resid = DVector::from_iterator(obs_idx.len(), observed.iter().zip(&obs_idx).map(|((_, v), &i)| v - belief.mean[i]));
    let mean = mu_f + s_of.transpose() * chol.solve(&resid);
    let mut cov = s_ff - s_of.transpose() * chol.solve(&s_of);
    linalg::symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov, labels })
}

/// Observed `(cell, value)` pairs of `patient` on days `1..=t`.
pub fn history(patient: &PatientRecord, t: u32) -> Vec<(Cell, f64)> {
    let mut out: Vec<(Cell, f64)> = patient
        .observed_cells(t)
        .into_iter()
        .map(|(day, k, v)| (Cell::new(day, k), v))
        .collect();
    out.sort_by_key(|(c, _)| *c);
    out
}

/// Keeps the `a` most recent observed days of each biomarker.
pub fn local_restrict(history: &[(Cell, f64)], a: usize) -> Vec<(Cell, f64)> {
    let mut out: Vec<(Cell, f64)> = Vec::with_capacity(history.len());
    let k_max = history.iter().map(|(c, _)| c.biomarker + 1).max().unwrap_or(0);
    for k in 0..k_max {
        let mut cells: Vec<(Cell, f64)> = history.iter().filter(|(c, _)| c.biomarker == k).copied().collect();
        cells.sort_by_key(|(c, _)| c.day);
        let skip = cells.len().saturating_sub(a);
        out.extend(cells.into_iter().skip(skip));
    }
    out
}

/// Log-density of `cells` under `fit` aligned on the hypothesized event day.
pub fn loglik(fit: &MlmmFit, patient: &PatientRecord, event_day: u32, cells: &[(Cell, f64)]) -> Result<f64> {
    if cells.is_empty() {
        return Ok(0.0);
    }
    let labels: Vec<Cell> = cells.iter().map(|(c, _)| *c).collect();
    let belief = fit.joint(patient, &labels, TimeAxis::Retrospective { event_day })?;
    let mut y = DVector::zeros(cells.len());
    for (c, v) in cells {
        y[belief.position(*c).expect("label present")] = *v;
    }
    linalg::gaussian_logpdf(&y, &belief.mean, &belief.cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Outcome;
    use approx::assert_abs_diff_eq;

    fn toy_spec() -> DesignSpec {
        let basis = SplineBasis::new(vec![], (0.0, 10.0)).unwrap();
        let mut s = DesignSpec::new(basis, &[], vec!["a".into()]);
        s.include_baseline = false;
        s
    }

    #[test]
    fn bivariate_conditioning() {
        let b = GaussianBelief {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            labels: vec![Cell::new(1, 0), Cell::new(2, 0)],
        };
        let c = condition_on_past(&b, &[(Cell::new(2, 0), 1.0)]).unwrap();
        assert_abs_diff_eq!(c.mean[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(c.cov[(0, 0)], 0.75, epsilon = 1e-14);
        let all = condition_on_past(&b, &[(Cell::new(1, 0), 0.0), (Cell::new(2, 0), 1.0)]).unwrap();
        assert!(all.is_empty());
    }

    #[test]
    fn independent_block_is_unchanged() {
        let b = GaussianBelief {
            mean: DVector::from_vec(vec![1.0, 2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            labels: vec![Cell::new(1, 0), Cell::new(1, 1)],
        };
        let c = condition_on_past(&b, &[(Cell::new(1, 1), 9.0)]).unwrap();
        assert_eq!(c.mean[0], 1.0);
        assert_eq!(c.cov[(0, 0)], 2.0);
    }

    #[test]
    fn singular_observed_block_is_reported() {
        let b = GaussianBelief {
            mean: DVector::zeros(3),
            cov: DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            labels: vec![Cell::new(1, 0), Cell::new(2, 0), Cell::new(3, 0)],
        };
        let err = condition_on_past(&b, &[(Cell::new(1, 0), 0.0), (Cell::new(2, 0), 0.0)]).unwrap_err();
        assert!(matches!(err, Error::SingularObservedBlock { .. }));
    }

    #[test]
    fn hand_computed_two_day_joint() {
        // one biomarker, intercept + one spline column; D and R chosen by hand
        let spec = toy_spec();
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let r = DMatrix::from_element(1, 1, 0.3);
        let fit = MlmmFit::from_parameters(FitMode::Prospective, spec.clone(), &[1.0, 2.0], d, r).unwrap();
        let mut p = PatientRecord::new("p", vec![], vec![0.0], 10, Outcome::Censored);
        p.set_value(0, 2, Some(0.0));
        p.set_value(0, 5, Some(0.0));
        let cells = [Cell::new(2, 0), Cell::new(5, 0)];
        let b = fit.joint(&p, &cells, TimeAxis::Prospective).unwrap();
        let s = |x: f64| fit.spec.time_basis.eval(x)[0];
        let z = [[1.0, s(2.0)], [1.0, s(5.0)]];
        for i in 0..2 {
            assert_abs_diff_eq!(b.mean[i], 1.0 + 2.0 * z[i][1], epsilon = 1e-12);
            for j in 0..2 {
                let zdz = 0.5 + 0.1 * (z[i][1] + z[j][1]) + 0.2 * z[i][1] * z[j][1];
                let expect = zdz + if i == j { 0.3 } else { 0.0 };
                assert_abs_diff_eq!(b.cov[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn loglik_at_mean_and_translation_invariance() {
        let mut spec = toy_spec();
        spec.random_effects = true;
        let d = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.0]);
        let r = DMatrix::from_element(1, 1, 0.6);
        // intercept-only mean curve
        let fit = MlmmFit::from_parameters(FitMode::Retrospective(EventType::Death), spec, &[0.7, 0.0], d, r).unwrap();
        let p = PatientRecord::new("p", vec![], vec![0.0], 20, Outcome::Censored);
        let cells = [(Cell::new(1, 0), 0.7), (Cell::new(2, 0), 0.7)];
        let ll = loglik(&fit, &p, 10, &cells).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let expect = -0.5 * ((2.0 * std::f64::consts::PI).powi(2) * cov.determinant()).ln();
        assert_abs_diff_eq!(ll, expect, epsilon = 1e-12);
        let other = [(Cell::new(1, 0), 0.1), (Cell::new(2, 0), 1.5)];
        assert_abs_diff_eq!(loglik(&fit, &p, 10, &other).unwrap(), loglik(&fit, &p, 11, &other).unwrap(), epsilon = 1e-12);
        // bivariate normal density by hand
        let (x1, x2) = (0.1 - 0.7, 1.5 - 0.7);
        let det: f64 = 1.0 - 0.16;
        let quad = (x1 * x1 - 0.8 * x1 * x2 + x2 * x2) / det;
        let direct = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad;
        assert_abs_diff_eq!(loglik(&fit, &p, 10, &other).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn local_window_keeps_latest_days() {
        let hist: Vec<(Cell, f64)> = (1..=12).flat_map(|d| (0..2).map(move |k| (Cell::new(d, k), d as f64))).collect();
        let r = local_restrict(&hist, 3);
        let days: Vec<u32> = r.iter().filter(|(c, _)| c.biomarker == 0).map(|(c, _)| c.day).collect();
        assert_eq!(days, [10, 11, 12]);
        assert_eq!(r.len(), 6);
        assert_eq!(local_restrict(&hist, 12).len(), hist.len());
        let last: Vec<u32> = local_restrict(&hist, 1).iter().map(|(c, _)| c.day).collect();
        assert_eq!(last, [12, 12]);
    }
}
