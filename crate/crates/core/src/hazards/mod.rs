//! Discrete-time competing-risks hazards.
//!
//! On each at-risk day `t`, `log(π_tm / π_t0) = g_t γ_m + f_t α_m` for
//! `m = 1..M`, where `g_t = [1, ns(t), covariates, Y0]` and `f_t` holds the
//! previous value and slope of every biomarker (prospective model only).

mod multinomial;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, CohortSchema, EventType, PatientRecord, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::mlmm::Coefficient;
use crate::transforms::{CovariateEncoder, SplineBasis};

pub use multinomial::{fit_multinomial, softmax_with_reference, MultinomialFit, MultinomialOptions};

pub const HAZARD_FORMAT_VERSION: u32 = 1;

/// Previous value and gap-normalized slope per biomarker, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub values: Vec<f64>,
    /// Biomarkers with no value on days `1..t-1` (previous value taken from `Y0`).
    pub no_prior: Vec<bool>,
}

/// Features for day `t` from values on days `1..t-1`, read through `lookup(k, day)`.
pub fn build_features_with(baseline: &[f64], t: u32, lookup: impl Fn(usize, u32) -> Option<f64>) -> FeatureRow {
    let k = baseline.len();
    let mut values = Vec::with_capacity(2 * k);
    let mut no_prior = Vec::with_capacity(k);
    for kk in 0..k {
        let mut found: [Option<(u32, f64)>; 2] = [None, None];
        let mut day = t.saturating_sub(1);
        while day >= 1 && found[1].is_none() {
            if let Some(v) = lookup(kk, day) {
                if found[0].is_none() {
                    found[0] = Some((day, v));
                } else {
                    found[1] = Some((day, v));
                }
            }
            day -= 1;
        }
        match found {
            [Some((a, ya)), Some((b, yb))] => {
                values.extend([ya, (ya - yb) / (a - b) as f64]);
                no_prior.push(false);
            }
            [Some((_, ya)), None] => {
                values.extend([ya, 0.0]);
                no_prior.push(false);
            }
            _ => {
                values.extend([baseline[kk], 0.0]);
                no_prior.push(true);
            }
        }
    }
    FeatureRow { values, no_prior }
}

pub fn build_features(patient: &PatientRecord, t: u32) -> FeatureRow {
    build_features_with(&patient.baseline, t, |k, d| patient.value(k, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HazardKind {
    /// Baseline design plus dynamic biomarker features.
    Prospective,
    /// Baseline design only.
    Retrospective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardDesign {
    pub kind: HazardKind,
    pub day_basis: SplineBasis,
    pub covariates: CovariateEncoder,
    pub biomarkers: Vec<String>,
}

impl HazardDesign {
    pub fn new(kind: HazardKind, day_basis: SplineBasis, schema: &CohortSchema) -> Self {
        Self {
            kind,
            day_basis,
            covariates: CovariateEncoder::new(schema.covariates.clone()),
            biomarkers: schema.biomarker_names(),
        }
    }

    /// Day-spline knots at quantiles of the at-risk patient-days.
    pub fn for_dataset(kind: HazardKind, dataset: &CohortDataset, df: usize) -> Result<Self> {
        let mut days: Vec<f64> = dataset.patients.iter().flat_map(|p| (1..=p.last_day()).map(f64::from)).collect();
        let basis = match SplineBasis::from_data(&days, df) {
            Ok(b) => b,
            Err(Error::InvalidConfig(_)) => {
                days.sort_by(f64::total_cmp);
                days.dedup();
                SplineBasis::from_data(&days, df)?
            }
            Err(e) => return Err(e),
        };
        Ok(Self::new(kind, basis, &dataset.schema))
    }

    pub fn baseline_width(&self) -> usize {
        1 + self.day_basis.df() + self.covariates.width() + self.biomarkers.len()
    }

    pub fn width(&self) -> usize {
        self.baseline_width() + if self.kind == HazardKind::Prospective { 2 * self.biomarkers.len() } else { 0 }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        names.extend((1..=self.day_basis.df()).map(|j| format!("day ns{j}")));
        names.extend(self.covariates.columns());
        names.extend(self.biomarkers.iter().map(|b| format!("{b}, BL")));
        if self.kind == HazardKind::Prospective {
            for b in &self.biomarkers {
                names.push(format!("{b}, PV"));
                names.push(format!("{b}, PS"));
            }
        }
        names
    }

    /// `g_t`.
    pub fn baseline_row(&self, patient: &PatientRecord, day: u32) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.width());
        row.push(1.0);
        row.extend(self.day_basis.eval(day as f64));
        self.covariates.encode_into(&patient.covariates, &mut row);
        row.extend_from_slice(&patient.baseline);
        row
    }

    /// `[g_t, f_t]` (or `g_t` for the retrospective design) from the patient's own history.
    pub fn row(&self, patient: &PatientRecord, day: u32) -> Vec<f64> {
        let mut row = self.baseline_row(patient, day);
        if self.kind == HazardKind::Prospective {
            row.extend(build_features(patient, day).values);
        }
        row
    }

    /// One row per at-risk patient-day with outcome 0 (no event) or the event code.
    pub fn rows(&self, dataset: &CohortDataset) -> (DMatrix<f64>, Vec<u8>) {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for p in &dataset.patients {
            for day in 1..=p.last_day() {
                data.extend(self.row(p, day));
                y.push(match p.outcome.event_day() {
                    Some(d) if d == day => p.outcome.kind().expect("event").code(),
                    _ => 0,
                });
            }
        }
        (DMatrix::from_row_slice(y.len(), self.width(), &data), y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCoefficients {
    pub event: EventType,
    pub coefficients: Vec<Coefficient>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardDiagnostics {
    #[serde(with = "crate::linalg::nan_as_null")]
    pub penalized_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
    pub ridge: f64,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HazardFitDoc {
    version: u32,
    design: HazardDesign,
    events: Vec<EventCoefficients>,
    diagnostics: HazardDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HazardFitDoc", into = "HazardFitDoc")]
pub struct HazardFit {
    pub design: HazardDesign,
    /// `width × M`, column `m - 1` for event code `m`.
    pub coef: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub diagnostics: HazardDiagnostics,
}

impl From<HazardFit> for HazardFitDoc {
    fn from(f: HazardFit) -> Self {
        let names = f.design.column_names();
        let events = EventType::ALL
            .iter()
            .map(|&event| EventCoefficients {
                event,
                coefficients: names
                    .iter()
                    .enumerate()
                    .map(|(j, n)| Coefficient {
                        name: n.clone(),
                        estimate: f.coef[(j, event.index())],
                        se: f.se[(j, event.index())],
                    })
                    .collect(),
            })
            .collect();
        HazardFitDoc { version: HAZARD_FORMAT_VERSION, design: f.design, events, diagnostics: f.diagnostics }
    }
}

impl TryFrom<HazardFitDoc> for HazardFit {
    type Error = String;

    fn try_from(doc: HazardFitDoc) -> std::result::Result<Self, String> {
        let p = doc.design.width();
        if doc.events.len() != NUM_EVENTS || doc.events.iter().any(|e| e.coefficients.len() != p) {
            return Err(format!("hazard fit needs {NUM_EVENTS} events with {p} coefficients each"));
        }
        let mut coef = DMatrix::zeros(p, NUM_EVENTS);
        let mut se = DMatrix::zeros(p, NUM_EVENTS);
        for e in &doc.events {
            for (j, c) in e.coefficients.iter().enumerate() {
                coef[(j, e.event.index())] = c.estimate;
                se[(j, e.event.index())] = c.se;
            }
        }
        Ok(HazardFit { design: doc.design, coef, se, diagnostics: doc.diagnostics })
    }
}

impl HazardFit {
    /// Fit with given coefficients (no estimation diagnostics).
    pub fn from_coefficients(design: HazardDesign, coef: DMatrix<f64>) -> Result<Self> {
        if coef.shape() != (design.width(), NUM_EVENTS) {
            return Err(Error::DimensionMismatch(format!("expected {}x{NUM_EVENTS} coefficients", design.width())));
        }
        let se = DMatrix::from_element(coef.nrows(), coef.ncols(), f64::NAN);
        Ok(Self {
            design,
            coef,
            se,
            diagnostics: HazardDiagnostics {
                penalized_loglik: f64::NAN,
                iterations: 0,
                converged: true,
                separation: false,
                ridge: 0.0,
                n_rows: 0,
            },
        })
    }

    pub fn ensure_converged(&self) -> Result<&Self> {
        if self.diagnostics.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { what: "hazard fit".into(), iterations: self.diagnostics.iterations })
        }
    }

    /// `(π_0, ..., π_M)` for a full design row.
    pub fn probs(&self, row: &[f64]) -> [f64; NUM_EVENTS + 1] {
        hazard_probs(&self.coef, row)
    }

    /// Hazards on `day` from baseline information only (retrospective design).
    pub fn baseline_probs(&self, patient: &PatientRecord, day: u32) -> [f64; NUM_EVENTS + 1] {
        self.probs(&self.design.baseline_row(patient, day))
    }
}

/// Softmax over `{0..M}` with category 0 as the zero-predictor reference.
pub fn hazard_probs(coef: &DMatrix<f64>, row: &[f64]) -> [f64; NUM_EVENTS + 1] {
    let mut eta = [0.0; NUM_EVENTS];
    for (m, e) in eta.iter_mut().enumerate() {
        *e = row.iter().enumerate().map(|(j, x)| x * coef[(j, m)]).sum();
    }
    let p = softmax_with_reference(&eta);
    [p[0], p[1], p[2], p[3]]
}

/// Fits the hazard model to every at-risk patient-day of a transformed dataset.
pub fn fit_hazards(dataset: &CohortDataset, design: HazardDesign, options: &MultinomialOptions) -> Result<HazardFit> {
    let (x, y) = design.rows(dataset);
    let m = fit_multinomial(&x, &y, NUM_EVENTS + 1, options)?;
    Ok(HazardFit {
        design,
        coef: m.coef,
        se: m.se,
        diagnostics: HazardDiagnostics {
            penalized_loglik: m.penalized_loglik,
            iterations: m.iterations,
            converged: m.converged,
            separation: m.separation,
            ridge: options.ridge,
            n_rows: y.len(),
        },
    })
}

/// Initial distribution over (event day, event type) after day `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiGrid {
    /// Conditioning day; row `i` is event day `t + 1 + i`.
    pub from_day: u32,
    pub values: Vec<[f64; NUM_EVENTS]>,
    /// Probability of no event through the horizon.
    pub remainder: f64,
}

impl XiGrid {
    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.values.len()).map(move |i| self.from_day + 1 + i as u32)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum::<f64>() + self.remainder
    }
}

/// `ξ_τm = π_τm ∏_{s=t+1}^{τ-1} π_s0` from per-day hazards on days `t+1..=horizon`.
pub fn xi_from_hazards(from_day: u32, hazards: &[[f64; NUM_EVENTS + 1]]) -> XiGrid {
    let mut surv = 1.0;
    let mut values = Vec::with_capacity(hazards.len());
    for h in hazards {
        values.push([surv * h[1], surv * h[2], surv * h[3]]);
        surv *= h[0];
    }
    XiGrid { from_day, values, remainder: surv }
}

/// ξ grid from the baseline-only hazards of a retrospective fit.
pub fn xi_grid(fit: &HazardFit, patient: &PatientRecord, t: u32, horizon: u32) -> Result<XiGrid> {
    if t >= horizon {
        return Err(Error::Precondition(format!("conditioning day {t} is not before the horizon {horizon}")));
    }
    let hazards: Vec<_> = (t + 1..=horizon).map(|d| fit.baseline_probs(patient, d)).collect();
    Ok(xi_from_hazards(t, &hazards))
}
