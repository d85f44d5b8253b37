//! Synthetic cohorts with known generating parameters.
//!
//! Two generators are available. The retrospective one first draws the event
//! day and type from baseline-only hazards, then draws biomarkers from the
//! event-type mixed model on the time axis `u = t - τ`. The prospective one
//! draws biomarkers from a single mixed model on days since admission and
//! then events from hazards that depend on the observed biomarker history.
//!
//! Biomarkers are generated on a latent Gaussian scale and optionally mapped
//! to clinical units.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    BiomarkerId, CohortDataset, CohortSchema, CovariateDef, CovariateValue, EventType, Outcome, PatientRecord, NUM_EVENTS,
};
use crate::error::{Error, Result};
use crate::hazards::{build_features_with, HazardDesign, HazardFit, HazardKind};
use crate::linalg::{self, serde_matrix};
use crate::mlmm::{FitMode, MlmmFit};
use crate::transforms::{normal_cdf, DesignSpec, SplineBasis, TimeAxis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Retrospective,
    Prospective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Event mix of the reference COVID-19 cohort (discharge 1378, ventilation 199, death 110).
    Reference,
    /// Moderate biomarker-event coupling with about 10% censoring.
    Calibration,
    /// Strong baseline and trajectory differences between event types.
    StrongCoupling,
    /// Even event mix, so every stratum of a cohort of a few hundred can be fit.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub horizon: u32,
    pub generator: GeneratorKind,
    /// One fit per event type (retrospective) or a single prospective fit.
    pub true_mlmm_params: Vec<MlmmFit>,
    /// Baseline-only hazards (retrospective) or hazards with biomarker features (prospective).
    pub true_hazard_params: HazardFit,
    /// Target proportions of discharge, ventilation and death; the rest is censored.
    /// When set, hazard intercepts are recalibrated on the generated covariates.
    pub event_mix: Option<[f64; NUM_EVENTS]>,
    /// Latent covariance of the baseline biomarkers `Y0`.
    #[serde(with = "serde_matrix")]
    pub baseline_cov: DMatrix<f64>,
    /// Probability that a biomarker-day cell is observed.
    pub p_obs: f64,
    /// Map latent values to clinical units; otherwise values stay on the latent scale.
    pub raw_scale: bool,
}

/// Parameters actually used, after intercept calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mlmm: Vec<MlmmFit>,
    pub hazard: HazardFit,
    /// Model-implied probabilities of discharge, ventilation, death and censoring,
    /// averaged over the generated patients.
    pub expected_mix: [f64; NUM_EVENTS + 1],
    /// Sampled `(τ, m)` per patient; censored patients of the retrospective
    /// generator carry `τ = horizon + 1` and the type their biomarkers follow.
    pub latent_events: Vec<Option<(u32, EventType)>>,
}

pub const BIOMARKERS: [(&str, &str); 3] = [("sf_ratio", "ratio"), ("pulse", "bpm"), ("temp", "degC")];

/// Latent value to clinical units.
pub fn latent_to_raw(biomarker: usize, z: f64) -> f64 {
    match biomarker {
        0 => 80.0 + 400.0 * normal_cdf(0.9 * z),
        1 => 85.0 * (0.14 * z).exp(),
        _ => 37.0 + 0.55 * z,
    }
}

pub fn synthetic_schema(horizon: u32) -> CohortSchema {
    CohortSchema {
        biomarkers: BIOMARKERS
            .iter()
            .enumerate()
            .map(|(index, (name, unit))| BiomarkerId { index, name: name.to_string(), unit: unit.to_string() })
            .collect(),
        covariates: vec![
            CovariateDef::real("age"),
            CovariateDef::categorical("sex", &["F", "M"], "F"),
            CovariateDef::categorical("bmi30", &["no", "yes"], "no"),
            CovariateDef::categorical("cci", &["0", "1-2", "3+"], "0"),
        ],
        horizon,
    }
}

const K: usize = 3;
const REFERENCE_COUNTS: [f64; NUM_EVENTS] = [1378.0, 199.0, 110.0];
/// Smallest censored fraction the calibration aims for.
const MIN_REMAINDER: f64 = 1e-3;

fn corr3(r01: f64, r02: f64, r12: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, r01, r02, r01, 1.0, r12, r02, r12, 1.0])
}

fn scale_cov(corr: &DMatrix<f64>, sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(corr.nrows(), corr.ncols(), |i, j| corr[(i, j)] * sd[i] * sd[j])
}

/// `D[(k,a),(l,b)] = C_kl sqrt(s_k s_l) δ_ab v_a`.
fn random_effects_cov(corr: &DMatrix<f64>, scale: &[f64], v: &[f64]) -> DMatrix<f64> {
    let q = v.len();
    let k = corr.nrows();
    DMatrix::from_fn(k * q, k * q, |i, j| {
        let (k1, a) = (i / q, i % q);
        let (k2, b) = (j / q, j % q);
        if a == b {
            corr[(k1, k2)] * (scale[k1] * scale[k2]).sqrt() * v[a]
        } else {
            0.0
        }
    })
}

/// Least-squares coefficients of `f` on `[1, basis(x)]` over `grid`.
fn project_curve(basis: &SplineBasis, grid: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let df = basis.df();
    let x = DMatrix::from_fn(grid.len(), df + 1, |i, j| if j == 0 { 1.0 } else { basis.eval(grid[i])[j - 1] });
    let y = DVector::from_iterator(grid.len(), grid.iter().map(|&u| f(u)));
    let xtx = x.transpose() * &x;
    xtx.cholesky().expect("spline grid has full rank").solve(&(x.transpose() * y)).iter().copied().collect()
}

fn knots(lo: f64, hi: f64, fractions: &[f64]) -> SplineBasis {
    SplineBasis::new(fractions.iter().map(|f| lo + f * (hi - lo)).collect(), (lo, hi)).expect("valid knots")
}

/// Fixed-effect block for one biomarker: curve, covariates, baseline biomarkers.
fn beta_block(curve: &[f64], covs: [f64; 5], baseline: [f64; K]) -> Vec<f64> {
    let mut b = curve.to_vec();
    b.extend(covs);
    b.extend(baseline);
    b
}

fn own_baseline(k: usize, own: f64, other: f64) -> [f64; K] {
    let mut b = [other; K];
    b[k] = own;
    b
}

/// Per-biomarker covariate effects (age per year, male, BMI ≥ 30, CCI 1-2, CCI 3+).
const COV_EFFECTS: [[f64; 5]; K] = [
    [-0.004, -0.05, -0.10, -0.05, -0.15],
    [0.002, 0.05, 0.05, 0.05, 0.10],
    [0.0, 0.05, 0.0, 0.0, 0.05],
];

fn mixed_model_variance(q: usize, inflate: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut v = vec![0.06; q];
    v[0] = 0.30;
    let d = random_effects_cov(&corr3(-0.3, -0.2, 0.3), &[inflate, 1.0, 1.0], &v);
    let r = scale_cov(&corr3(-0.25, -0.15, 0.3), &[0.45 * inflate, 0.5, 0.55]);
    (d, r)
}

fn retrospective_truth(schema: &CohortSchema, coupling: f64) -> (Vec<MlmmFit>, HazardFit) {
    let h = schema.horizon as f64;
    let basis = knots(1.0 - h, 0.0, &[0.45, 0.75, 0.92]);
    let spec = DesignSpec::new(basis.clone(), &schema.covariates, schema.biomarker_names());
    let grid: Vec<f64> = (0..=200).map(|i| (1.0 - h) + i as f64 * (h - 1.0) / 200.0).collect();
    // (level far from the event, change approaching it) per event type and biomarker
    let shapes: [[(f64, f64); K]; NUM_EVENTS] = [
        [(0.2, 0.6), (0.1, -0.5), (0.1, -0.4)],
        [(-0.3, -1.5), (0.2, 0.9), (0.2, 0.6)],
        [(-0.4, -1.2), (0.3, 1.0), (0.0, 0.3)],
    ];
    let fits = EventType::ALL
        .iter()
        .map(|&m| {
            let mut beta = Vec::new();
            for (k, &(level, change)) in shapes[m.index()].iter().enumerate() {
                let curve = project_curve(&basis, &grid, |u| level + coupling * change * (u / 3.0).exp());
                beta.extend(beta_block(&curve, COV_EFFECTS[k], own_baseline(k, 0.4, 0.05)));
            }
            let (d, r) = mixed_model_variance(spec.q(), [1.0, 1.2, 1.1][m.index()]);
            MlmmFit::from_parameters(FitMode::Retrospective(m), spec.clone(), &beta, d, r).expect("conformable truth")
        })
        .collect();

    let design = HazardDesign::new(HazardKind::Retrospective, knots(1.0, h, &[0.2, 0.45, 0.7]), schema);
    let days: Vec<f64> = (1..=schema.horizon + 1).map(f64::from).collect();
    let slopes = [0.08, -0.10, 0.02];
    let intercepts = [-2.0, -3.5, -4.0];
    let covs = [[-0.01, 0.05, 0.25, -0.2, -0.4], [0.0, 0.2, -0.5, 0.0, 0.1], [0.04, 0.0, 0.15, 0.4, 0.8]];
    let bl = [
        [0.3, -0.1, -0.1],
        [-0.8 * coupling, 0.5 * coupling, 0.3 * coupling],
        [-0.6 * coupling, 0.4 * coupling, 0.2 * coupling],
    ];
    let mut coef = DMatrix::zeros(design.width(), NUM_EVENTS);
    for m in 0..NUM_EVENTS {
        let day = project_curve(&design.day_basis, &days, |t| slopes[m] * (t - 1.0));
        let mut col = vec![intercepts[m] + day[0]];
        col.extend(&day[1..]);
        col.extend(covs[m]);
        col.extend(bl[m]);
        for (j, v) in col.into_iter().enumerate() {
            coef[(j, m)] = v;
        }
    }
    (fits, HazardFit::from_coefficients(design, coef).expect("conformable truth"))
}

fn prospective_truth(schema: &CohortSchema, coupling: f64) -> (Vec<MlmmFit>, HazardFit) {
    let h = schema.horizon as f64;
    let basis = knots(1.0, h, &[0.08, 0.2, 0.45]);
    let spec = DesignSpec::new(basis.clone(), &schema.covariates, schema.biomarker_names());
    let grid: Vec<f64> = (0..=200).map(|i| 1.0 + i as f64 * (h - 1.0) / 200.0).collect();
    let shapes = [(0.0, 0.5), (0.1, -0.4), (0.1, -0.5)];
    let mut beta = Vec::new();
    for (k, &(level, change)) in shapes.iter().enumerate() {
        let curve = project_curve(&basis, &grid, |t| level + change * (1.0 - (-(t - 1.0) / 4.0).exp()));
        beta.extend(beta_block(&curve, COV_EFFECTS[k], own_baseline(k, 0.4, 0.05)));
    }
    let (d, r) = mixed_model_variance(spec.q(), 1.0);
    let fit = MlmmFit::from_parameters(FitMode::Prospective, spec, &beta, d, r).expect("conformable truth");

    let design = HazardDesign::new(HazardKind::Prospective, knots(1.0, h, &[0.1, 0.25, 0.5]), schema);
    let days: Vec<f64> = (1..=schema.horizon + 1).map(f64::from).collect();
    let slopes = [0.06, -0.08, 0.0];
    let intercepts = [-2.2, -3.6, -4.2];
    let covs = [[-0.01, 0.05, 0.25, -0.2, -0.4], [0.0, 0.2, -0.5, 0.0, 0.1], [0.04, 0.0, 0.15, 0.4, 0.8]];
    let bl = [[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1], [-0.2, 0.2, 0.1]];
    // previous value and slope of (sf, pulse, temp)
    let dynamic = [
        [0.6, 0.3, -0.3, 0.0, -0.2, 0.0],
        [-1.0, -0.5, 0.5, 0.2, 0.3, 0.0],
        [-0.8, -0.3, 0.6, 0.2, 0.3, 0.1],
    ];
    let mut coef = DMatrix::zeros(design.width(), NUM_EVENTS);
    for m in 0..NUM_EVENTS {
        let day = project_curve(&design.day_basis, &days, |t| slopes[m] * (t - 1.0));
        let mut col = vec![intercepts[m] + day[0]];
        col.extend(&day[1..]);
        col.extend(covs[m]);
        col.extend(bl[m]);
        col.extend(dynamic[m].iter().map(|a| a * coupling));
        for (j, v) in col.into_iter().enumerate() {
            coef[(j, m)] = v;
        }
    }
    (vec![fit], HazardFit::from_coefficients(design, coef).expect("conformable truth"))
}

impl SynthConfig {
    pub fn preset(preset: Preset, generator: GeneratorKind, n_patients: usize, seed: u64) -> Self {
        let horizon = 20;
        let schema = synthetic_schema(horizon);
        let (coupling, mix) = match preset {
            Preset::Reference => {
                let total: f64 = REFERENCE_COUNTS.iter().sum();
                (1.0, REFERENCE_COUNTS.map(|c| c / total))
            }
            Preset::Calibration => (1.0, [0.70, 0.12, 0.08]),
            Preset::StrongCoupling => (2.0, [0.65, 0.15, 0.10]),
            Preset::Balanced => (1.0, [0.45, 0.25, 0.20]),
        };
        let (true_mlmm_params, true_hazard_params) = match generator {
            GeneratorKind::Retrospective => retrospective_truth(&schema, coupling),
            GeneratorKind::Prospective => prospective_truth(&schema, coupling),
        };
        Self {
            n_patients,
            seed,
            horizon,
            generator,
            true_mlmm_params,
            true_hazard_params,
            event_mix: Some(mix),
            baseline_cov: scale_cov(&corr3(-0.3, -0.2, 0.3), &[1.0, 1.0, 1.0]),
            p_obs: 0.85,
            raw_scale: true,
        }
    }

    /// Prospective cohort for parameter recovery: long follow-up, every cell
    /// observed, low residual noise and patient offsets dominating `D`.
    pub fn recovery(n_patients: usize, seed: u64) -> Self {
        let mut cfg = Self::preset(Preset::Calibration, GeneratorKind::Prospective, n_patients, seed);
        cfg.event_mix = Some([0.2, 0.03, 0.02]);
        cfg.p_obs = 1.0;
        cfg.raw_scale = false;
        let fit = &mut cfg.true_mlmm_params[0];
        let q = fit.spec.q();
        let v: Vec<f64> = (0..q).map(|a| if a == 0 { 4.0 } else { 0.02 }).collect();
        fit.d = random_effects_cov(&corr3(-0.3, -0.2, 0.3), &[1.0; K], &v);
        fit.r *= 0.3;
        cfg
    }

    pub fn schema(&self) -> CohortSchema {
        synthetic_schema(self.horizon)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2 days");
        }
        if !(self.p_obs > 0.0 && self.p_obs <= 1.0) {
            return bad("p_obs must lie in (0, 1]");
        }
        if let Some(mix) = self.event_mix {
            if mix.iter().any(|p| !(*p > 0.0)) || mix.iter().sum::<f64>() > 1.0 + 1e-12 {
                return bad("event_mix must be positive and sum to at most 1");
            }
        }
        let expected = match self.generator {
            GeneratorKind::Retrospective => NUM_EVENTS,
            GeneratorKind::Prospective => 1,
        };
        if self.true_mlmm_params.len() != expected {
            return bad("wrong number of mixed-model parameter sets for this generator");
        }
        let kind = match self.generator {
            GeneratorKind::Retrospective => HazardKind::Retrospective,
            GeneratorKind::Prospective => HazardKind::Prospective,
        };
        if self.true_hazard_params.design.kind != kind {
            return bad("hazard parameters do not match the generator");
        }
        let schema = self.schema();
        for f in &self.true_mlmm_params {
            if f.spec.num_biomarkers() != K || f.spec.covariates.defs != schema.covariates {
                return bad("mixed-model parameters do not match the synthetic schema");
            }
        }
        if self.baseline_cov.shape() != (K, K) || linalg::min_eigenvalue(&self.baseline_cov) < 0.0 {
            return bad("baseline_cov must be a 3x3 PSD matrix");
        }
        Ok(())
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn draw_covariates(rng: &mut ChaCha8Rng) -> Vec<CovariateValue> {
    let age = (62.0 + 15.0 * rng.sample::<f64, _>(StandardNormal)).clamp(18.0, 100.0).round();
    let sex = if rng.random::<f64>() < 0.45 { "M" } else { "F" };
    let bmi = if rng.random::<f64>() < 0.4 { "yes" } else { "no" };
    let u: f64 = rng.random();
    let cci = if u < 0.4 {
        "0"
    } else if u < 0.75 {
        "1-2"
    } else {
        "3+"
    };
    vec![
        CovariateValue::Real(age),
        CovariateValue::Level(sex.into()),
        CovariateValue::Level(bmi.into()),
        CovariateValue::Level(cci.into()),
    ]
}

fn sample_category(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Linear predictors of one patient-day without the intercepts.
type Offsets = Vec<Vec<[f64; NUM_EVENTS]>>;

fn offsets(hazard: &HazardFit, rows: &[Vec<Vec<f64>>]) -> Offsets {
    rows.iter()
        .map(|patient| {
            patient
                .iter()
                .map(|r| {
                    let mut eta = [0.0; NUM_EVENTS];
                    for (m, e) in eta.iter_mut().enumerate() {
                        *e = (1..r.len()).map(|j| r[j] * hazard.coef[(j, m)]).sum();
                    }
                    eta
                })
                .collect()
        })
        .collect()
}

/// Average cumulative incidence through the last row of each patient.
fn mix_at(intercepts: &[f64; NUM_EVENTS], offsets: &Offsets) -> [f64; NUM_EVENTS + 1] {
    let mut acc = [0.0; NUM_EVENTS + 1];
    for patient in offsets {
        let mut survival = 1.0;
        for eta in patient {
            let e = [0, 1, 2].map(|m| (eta[m] + intercepts[m]).exp());
            let denom = 1.0 + e.iter().sum::<f64>();
            for m in 0..NUM_EVENTS {
                acc[m] += survival * e[m] / denom;
            }
            survival /= denom;
        }
        acc[NUM_EVENTS] += survival;
    }
    acc.map(|v| v / offsets.len() as f64)
}

fn intercepts(hazard: &HazardFit) -> [f64; NUM_EVENTS] {
    [0, 1, 2].map(|m| hazard.coef[(0, m)])
}

fn expected_mix(hazard: &HazardFit, rows: &[Vec<Vec<f64>>]) -> [f64; NUM_EVENTS + 1] {
    mix_at(&intercepts(hazard), &offsets(hazard, rows))
}

/// Common intercept shift giving total incidence `target`; incidence increases with the shift.
fn match_total(c: &[f64; NUM_EVENTS], target: f64, offsets: &Offsets) -> [f64; NUM_EVENTS] {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let g = |s: f64| {
        let a = mix_at(&c.map(|v| v + s), offsets);
        logit(a[..NUM_EVENTS].iter().sum::<f64>().clamp(1e-300, 1.0 - 1e-16)) - logit(target)
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    let (mut glo, mut ghi) = (g(lo), g(hi));
    while glo > 0.0 && lo > -200.0 {
        lo *= 2.0;
        glo = g(lo);
    }
    while ghi < 0.0 && hi < 200.0 {
        hi *= 2.0;
        ghi = g(hi);
    }
    // Illinois regula falsi
    let mut side = 0;
    for _ in 0..200 {
        let s = (lo * ghi - hi * glo) / (ghi - glo);
        let gs = g(s);
        if gs.abs() < 1e-13 || hi - lo < 1e-14 {
            return c.map(|v| v + s);
        }
        if gs < 0.0 {
            (lo, glo) = (s, gs);
            if side == -1 {
                ghi /= 2.0;
            }
            side = -1;
        } else {
            (hi, ghi) = (s, gs);
            if side == 1 {
                glo /= 2.0;
            }
            side = 1;
        }
    }
    c.map(|v| v + 0.5 * (lo + hi))
}

/// Shifts the hazard intercepts until the average cumulative incidences match `mix`.
///
/// Alternates a proportional update of the event shares with a root-find for
/// the total incidence.
fn calibrate_intercepts(hazard: &mut HazardFit, mix: [f64; NUM_EVENTS], rows: &[Vec<Vec<f64>>]) -> Result<[f64; NUM_EVENTS + 1]> {
    let total: f64 = mix.iter().sum();
    let scale = if total > 1.0 - MIN_REMAINDER { (1.0 - MIN_REMAINDER) / total } else { 1.0 };
    let target = mix.map(|p| p * scale);
    let target_total: f64 = target.iter().sum();
    let off = offsets(hazard, rows);
    let mut c = intercepts(hazard);
    for _ in 0..500 {
        c = match_total(&c, target_total, &off);
        let achieved = mix_at(&c, &off);
        let share: f64 = achieved[..NUM_EVENTS].iter().sum();
        let err = (0..NUM_EVENTS).map(|m| (achieved[m] / target[m]).ln()).fold(0.0, |e: f64, v| e.max(v.abs()));
        if err < 1e-10 {
            for m in 0..NUM_EVENTS {
                hazard.coef[(0, m)] = c[m];
            }
            return Ok(achieved);
        }
        for m in 0..NUM_EVENTS {
            c[m] += (target[m] / target_total).ln() - (achieved[m] / share).ln();
        }
    }
    Err(Error::InvalidConfig("event_mix could not be reached by adjusting hazard intercepts".into()))
}

/// Latent values `Xβ + Zb + ε` on `days` for one patient.
fn draw_trajectory(
    rng: &mut ChaCha8Rng,
    fit: &MlmmFit,
    d_sqrt: &DMatrix<f64>,
    r_sqrt: &DMatrix<f64>,
    patient: &PatientRecord,
    axis: TimeAxis,
    days: std::ops::RangeInclusive<u32>,
) -> Vec<[f64; K]> {
    let (p, q) = (fit.spec.p(), fit.spec.q());
    let beta = fit.beta();
    let b = d_sqrt * normals(rng, K * q);
    days.map(|day| {
        let x = fit.spec.row(axis.time(day), &patient.covariates, &patient.baseline);
        let eps = r_sqrt * normals(rng, K);
        let mut out = [0.0; K];
        for k in 0..K {
            let mean: f64 = (0..p).map(|j| x[j] * beta[k * p + j]).sum();
            let re: f64 = (0..q).map(|j| x[j] * b[k * q + j]).sum();
            out[k] = mean + re + eps[k];
        }
        out
    })
    .collect()
}

fn observation_mask(rng: &mut ChaCha8Rng, days: usize, p_obs: f64) -> Vec<[bool; K]> {
    let mut mask: Vec<[bool; K]> = (0..days).map(|_| [(); K].map(|_| rng.random::<f64>() < p_obs)).collect();
    if !mask.iter().flatten().any(|&b| b) {
        let k = rng.random_range(0..K);
        mask[0][k] = true;
    }
    mask
}

fn finish(config: &SynthConfig, patients: Vec<PatientRecord>) -> Result<CohortDataset> {
    let patients = if config.raw_scale {
        patients.into_iter().map(|p| p.map_values(latent_to_raw)).collect()
    } else {
        patients
    };
    CohortDataset::new(config.schema(), patients)
}

/// Draws a cohort; the same config always yields the same cohort.
pub fn generate_synthetic_cohort(config: &SynthConfig) -> Result<(CohortDataset, GroundTruth)> {
    config.validate()?;
    match config.generator {
        GeneratorKind::Retrospective => generate_retrospective(config),
        GeneratorKind::Prospective => generate_prospective(config),
    }
}

fn baseline_patients(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PatientRecord> {
    let l0 = linalg::sqrt_psd(&config.baseline_cov);
    (0..config.n_patients)
        .map(|i| {
            let covs = draw_covariates(rng);
            let y0 = &l0 * normals(rng, K);
            PatientRecord::new(&format!("P{:05}", i + 1), covs, y0.iter().copied().collect(), config.horizon, Outcome::Censored)
        })
        .collect()
}

fn generate_retrospective(config: &SynthConfig) -> Result<(CohortDataset, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.horizon;
    let mut patients = baseline_patients(config, &mut rng);
    let mut hazard = config.true_hazard_params.clone();
    // rows for days 1..=h; day h+1 only picks the type of censored patients
    let rows: Vec<Vec<Vec<f64>>> =
        patients.iter().map(|p| (1..=h).map(|d| hazard.design.baseline_row(p, d)).collect()).collect();
    let expected = match config.event_mix {
        Some(mix) => calibrate_intercepts(&mut hazard, mix, &rows)?,
        None => expected_mix(&hazard, &rows),
    };
    let sqrt: Vec<_> = config.true_mlmm_params.iter().map(|f| (linalg::sqrt_psd(&f.d), linalg::sqrt_psd(&f.r))).collect();
    let mut latent = Vec::with_capacity(patients.len());
    for p in &mut patients {
        let mut event = None;
        for day in 1..=h {
            let c = sample_category(&mut rng, &hazard.baseline_probs(p, day));
            if c > 0 {
                event = Some((day, EventType::from_index(c - 1)));
                break;
            }
        }
        let (tau, m) = match event {
            Some(e) => {
                p.outcome = Outcome::Event { kind: e.1, day: e.0 };
                e
            }
            None => {
                let pr = hazard.baseline_probs(p, h + 1);
                (h + 1, EventType::from_index(sample_category(&mut rng, &pr[1..].iter().map(|v| v / (1.0 - pr[0])).collect::<Vec<_>>())))
            }
        };
        latent.push(Some((tau, m)));
        let last = tau.min(h);
        let fit = &config.true_mlmm_params[m.index()];
        let (ds, rs) = &sqrt[m.index()];
        let values = draw_trajectory(&mut rng, fit, ds, rs, p, TimeAxis::Retrospective { event_day: tau }, 1..=last);
        let mask = observation_mask(&mut rng, last as usize, config.p_obs);
        for (i, (v, o)) in values.iter().zip(&mask).enumerate() {
            for k in 0..K {
                if o[k] {
                    p.set_value(k, i as u32 + 1, Some(v[k]));
                }
            }
        }
    }
    let truth = GroundTruth { mlmm: config.true_mlmm_params.clone(), hazard, expected_mix: expected, latent_events: latent };
    Ok((finish(config, patients)?, truth))
}

fn generate_prospective(config: &SynthConfig) -> Result<(CohortDataset, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.horizon;
    let mut patients = baseline_patients(config, &mut rng);
    let fit = &config.true_mlmm_params[0];
    let (ds, rs) = (linalg::sqrt_psd(&fit.d), linalg::sqrt_psd(&fit.r));
    // full observed grids first; events only truncate them
    for p in &mut patients {
        let values = draw_trajectory(&mut rng, fit, &ds, &rs, p, TimeAxis::Prospective, 1..=h);
        let mask = observation_mask(&mut rng, h as usize, config.p_obs);
        for (i, (v, o)) in values.iter().zip(&mask).enumerate() {
            for k in 0..K {
                if o[k] {
                    p.set_value(k, i as u32 + 1, Some(v[k]));
                }
            }
        }
    }
    let mut hazard = config.true_hazard_params.clone();
    let rows: Vec<Vec<Vec<f64>>> = patients
        .iter()
        .map(|p| {
            (1..=h)
                .map(|d| {
                    let mut r = hazard.design.baseline_row(p, d);
                    r.extend(build_features_with(&p.baseline, d, |k, dd| p.value(k, dd)).values);
                    r
                })
                .collect()
        })
        .collect();
    let expected = match config.event_mix {
        Some(mix) => calibrate_intercepts(&mut hazard, mix, &rows)?,
        None => expected_mix(&hazard, &rows),
    };
    let mut latent = Vec::with_capacity(patients.len());
    for (p, prow) in patients.iter_mut().zip(&rows) {
        let mut event = None;
        for (i, r) in prow.iter().enumerate() {
            let c = sample_category(&mut rng, &hazard.probs(r));
            if c > 0 {
                event = Some((i as u32 + 1, EventType::from_index(c - 1)));
                break;
            }
        }
        if let Some((day, kind)) = event {
            p.outcome = Outcome::Event { kind, day };
            *p = p.truncated(day);
        }
        latent.push(event);
    }
    // truncation can remove every value; keep one on the first day
    for p in &mut patients {
        if p.num_observed() == 0 {
            let k = rng.random_range(0..K);
            let v = draw_trajectory(&mut rng, fit, &ds, &rs, p, TimeAxis::Prospective, 1..=1)[0][k];
            p.set_value(k, 1, Some(v));
        }
    }
    let truth = GroundTruth { mlmm: config.true_mlmm_params.clone(), hazard, expected_mix: expected, latent_events: latent };
    Ok((finish(config, patients)?, truth))
}
