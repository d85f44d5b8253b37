//! Per-patient design matrices for the multivariate mixed model.
//!
//! For biomarker `k` the fixed-effects row of an observed day is
//! `[1, spline(time), covariates, Y0]` and the random-effects row is its
//! first `1 + df` entries. The patient design is the direct sum over
//! biomarkers, with rows only for observed cells, ordered by biomarker then day.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::spline::SplineBasis;
use crate::cohort::{CovariateDef, CovariateKind, CovariateValue, PatientRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "lowercase")]
pub enum TimeAxis {
    /// Days since admission.
    Prospective,
    /// Days relative to the event, `u = t - event_day`.
    Retrospective { event_day: u32 },
}

impl TimeAxis {
    pub fn time(&self, day: u32) -> f64 {
        match self {
            TimeAxis::Prospective => day as f64,
            TimeAxis::Retrospective { event_day } => day as f64 - *event_day as f64,
        }
    }
}

/// Dummy/real encoding of baseline covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoder {
    pub defs: Vec<CovariateDef>,
}

impl CovariateEncoder {
    pub fn new(defs: Vec<CovariateDef>) -> Self {
        Self { defs }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.defs {
            match &d.kind {
                CovariateKind::Real => out.push(d.name.clone()),
                CovariateKind::Categorical { levels, reference } => {
                    out.extend(levels.iter().filter(|l| *l != reference).map(|l| format!("{}={l}", d.name)))
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.defs
            .iter()
            .map(|d| match &d.kind {
                CovariateKind::Real => 1,
                CovariateKind::Categorical { levels, .. } => levels.len() - 1,
            })
            .sum()
    }

    pub fn encode_into(&self, values: &[CovariateValue], out: &mut Vec<f64>) {
        for (d, v) in self.defs.iter().zip(values) {
            match (&d.kind, v) {
                (CovariateKind::Real, CovariateValue::Real(x)) => out.push(*x),
                (CovariateKind::Categorical { levels, reference }, CovariateValue::Level(l)) => {
                    out.extend(levels.iter().filter(|x| *x != reference).map(|x| if x == l { 1.0 } else { 0.0 }))
                }
                // validated datasets never mix kinds
                _ => panic!("covariate `{}` has a value of the wrong kind", d.name),
            }
        }
    }
}

/// The model formula shared by every biomarker block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub time_basis: SplineBasis,
    pub covariates: CovariateEncoder,
    pub biomarkers: Vec<String>,
    pub include_baseline: bool,
    pub random_effects: bool,
}

impl DesignSpec {
    pub fn new(time_basis: SplineBasis, covariates: &[CovariateDef], biomarkers: Vec<String>) -> Self {
        Self {
            time_basis,
            covariates: CovariateEncoder::new(covariates.to_vec()),
            biomarkers,
            include_baseline: true,
            random_effects: true,
        }
    }

    pub fn num_biomarkers(&self) -> usize {
        self.biomarkers.len()
    }

    /// Fixed-effect columns per biomarker.
    pub fn p(&self) -> usize {
        1 + self.time_basis.df()
            + self.covariates.width()
            + if self.include_baseline { self.biomarkers.len() } else { 0 }
    }

    /// Random-effect columns per biomarker.
    pub fn q(&self) -> usize {
        if self.random_effects {
            1 + self.time_basis.df()
        } else {
            0
        }
    }

    /// Shared design row `[1, spline(time), covariates, Y0]`.
    pub fn row(&self, time: f64, covariates: &[CovariateValue], baseline: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.p());
        row.push(1.0);
        row.extend(self.time_basis.eval(time));
        self.covariates.encode_into(covariates, &mut row);
        if self.include_baseline {
            row.extend_from_slice(baseline);
        }
        row
    }

    pub fn block_column_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        names.extend((1..=self.time_basis.df()).map(|j| format!("ns{j}(time)")));
        names.extend(self.covariates.columns());
        if self.include_baseline {
            names.extend(self.biomarkers.iter().map(|b| format!("{b}, BL")));
        }
        names
    }

    pub fn column_names(&self) -> Vec<String> {
        let block = self.block_column_names();
        self.biomarkers
            .iter()
            .flat_map(|b| block.iter().map(move |c| format!("{b}: {c}")))
            .collect()
    }
}

/// One (day, biomarker) cell of a patient's grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub biomarker: usize,
    pub day: u32,
}

impl Cell {
    pub fn new(day: u32, biomarker: usize) -> Self {
        Self { biomarker, day }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub cells: Vec<Cell>,
}

/// Design over every observed cell of `patient`.
pub fn build_design(patient: &PatientRecord, axis: TimeAxis, spec: &DesignSpec) -> DesignMatrices {
    let cells: Vec<Cell> = patient
        .observed_cells(patient.horizon())
        .into_iter()
        .map(|(day, k, _)| Cell::new(day, k))
        .collect();
    build_design_for_cells(patient, &cells, axis, spec)
}

/// Design over an arbitrary set of cells (observed or not). Cells are sorted
/// into block order first.
pub fn build_design_for_cells(
    patient: &PatientRecord,
    cells: &[Cell],
    axis: TimeAxis,
    spec: &DesignSpec,
) -> DesignMatrices {
    let mut cells = cells.to_vec();
    cells.sort();
    let (k, p, q) = (spec.num_biomarkers(), spec.p(), spec.q());
    let mut x = DMatrix::zeros(cells.len(), k * p);
    let mut z = DMatrix::zeros(cells.len(), k * q);
    let mut cached: Option<(u32, Vec<f64>)> = None;
    for (i, c) in cells.iter().enumerate() {
        let row = match &cached {
            Some((d, r)) if *d == c.day => r.clone(),
            _ => {
                let r = spec.row(axis.time(c.day), &patient.covariates, &patient.baseline);
                cached = Some((c.day, r.clone()));
                r
            }
        };
        for j in 0..p {
            x[(i, c.biomarker * p + j)] = row[j];
        }
        for j in 0..q {
            z[(i, c.biomarker * q + j)] = row[j];
        }
    }
    DesignMatrices { x, z, cells }
}

/// Fails with the names of columns that are (numerically) linear
/// combinations of earlier columns, given the cross-product matrix `X'X`.
pub fn check_rank(gram: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let n = gram.nrows();
    let scale: Vec<f64> = (0..n).map(|i| gram[(i, i)].max(0.0).sqrt()).collect();
    let mut a = DMatrix::from_fn(n, n, |i, j| {
        if scale[i] > 0.0 && scale[j] > 0.0 {
            gram[(i, j)] / (scale[i] * scale[j])
        } else {
            0.0
        }
    });
    let mut bad = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    // Cholesky without pivoting, skipping dependent columns
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for &m in &kept {
            d -= l[(j, m)] * l[(j, m)];
        }
        if scale[j] == 0.0 || d < 1e-10 {
            bad.push(names.get(j).cloned().unwrap_or_else(|| format!("column {j}")));
            continue;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for &m in &kept {
                s -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = s / dj;
        }
        kept.push(j);
    }
    a.fill(0.0);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient(bad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateDef, Outcome};

    fn spec(n_cov_real: usize) -> DesignSpec {
        let covs: Vec<CovariateDef> = (0..n_cov_real).map(|i| CovariateDef::real(&format!("c{i}"))).collect();
        let basis = SplineBasis::new(vec![-10.0, -5.0, -2.0], (-19.0, 0.0)).unwrap();
        DesignSpec::new(basis, &covs, vec!["sf".into(), "pulse".into(), "temp".into()])
    }

    fn patient(days: u32, covs: usize) -> PatientRecord {
        let c = (0..covs).map(|i| CovariateValue::Real(i as f64)).collect();
        let mut p = PatientRecord::new("p", c, vec![0.1, 0.2, 0.3], 20, Outcome::Censored);
        for d in 1..=days {
            for k in 0..3 {
                p.set_value(k, d, Some(d as f64));
            }
        }
        p
    }

    #[test]
    fn dimensions_follow_block_structure() {
        let s = spec(6);
        let d = build_design(&patient(5, 6), TimeAxis::Prospective, &s);
        assert_eq!((d.x.nrows(), d.x.ncols()), (15, 3 * (1 + 4 + 6 + 3)));
        assert_eq!((d.z.nrows(), d.z.ncols()), (15, 3 * 5));
        // block diagonal: rows of biomarker 1 vanish outside its block
        let p = s.p();
        for i in 5..10 {
            assert!((0..p).all(|j| d.x[(i, j)] == 0.0));
            assert!((2 * p..3 * p).all(|j| d.x[(i, j)] == 0.0));
            assert_eq!(d.x[(i, p)], 1.0);
        }
        // Z is a column subset of X
        for i in 0..15 {
            let k = d.cells[i].biomarker;
            for j in 0..s.q() {
                assert_eq!(d.z[(i, k * s.q() + j)], d.x[(i, k * p + j)]);
            }
        }
    }

    #[test]
    fn retrospective_axis_uses_days_before_event() {
        let s = spec(0);
        let mut p = patient(0, 0);
        p.set_value(0, 7, Some(1.0));
        let d = build_design(&p, TimeAxis::Retrospective { event_day: 10 }, &s);
        let spline = s.time_basis.eval(-3.0);
        for j in 0..4 {
            assert_eq!(d.x[(0, 1 + j)], spline[j]);
        }
    }

    #[test]
    fn missing_cell_drops_a_row() {
        let s = spec(2);
        let mut p = patient(5, 2);
        let full = build_design(&p, TimeAxis::Prospective, &s);
        p.set_value(1, 3, None);
        let partial = build_design(&p, TimeAxis::Prospective, &s);
        assert_eq!(partial.x.nrows() + 1, full.x.nrows());
    }

    #[test]
    fn categorical_encoding_drops_reference() {
        let enc = CovariateEncoder::new(vec![CovariateDef::categorical("cci", &["0", "1-2", "3+"], "0")]);
        assert_eq!(enc.columns(), ["cci=1-2", "cci=3+"]);
        let mut out = Vec::new();
        enc.encode_into(&[CovariateValue::Level("3+".into())], &mut out);
        assert_eq!(out, [0.0, 1.0]);
    }

    #[test]
    fn rank_check_names_duplicate_column() {
        let x = DMatrix::from_fn(30, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        match check_rank(&(x.transpose() * &x), &names) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, ["c"]),
            other => panic!("unexpected {other:?}"),
        }
        let ok = x.columns(0, 2).into_owned();
        assert!(check_rank(&(ok.transpose() * &ok), &names[..2]).is_ok());
    }
}
