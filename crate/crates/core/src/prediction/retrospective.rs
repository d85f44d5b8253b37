use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{retrospective_update, EventProbabilities, GridKind, PredictionGrid, DEFAULT_WINDOW};
use crate::cohort::{EventType, PatientRecord, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::hazards::{xi_grid, HazardFit, HazardKind};
use crate::linalg;
use crate::mlmm::{condition_on_past, history, local_restrict, loglik, MlmmFit};
use crate::transforms::{Cell, TimeAxis, Transforms};

/// Standard-normal quantile of the fan band.
const BAND_Z: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrospectiveOptions {
    /// Number of most recent observed days per biomarker entering the likelihood.
    pub window: usize,
    /// Compute the trajectory fan.
    pub fan: bool,
}

impl Default for RetrospectiveOptions {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, fan: true }
    }
}

/// One biomarker's predicted path on the raw scale; `lower`/`upper` bound a 95% band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanSeries {
    pub biomarker: String,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_variance: Vec<f64>,
}

/// Predicted biomarkers on days `t+1..=event_day` if the event is `(event_day, event)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanPath {
    pub event_day: u32,
    pub event: EventType,
    pub weight: f64,
    pub days: Vec<u32>,
    pub series: Vec<FanSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFan {
    pub paths: Vec<FanPath>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrospectivePrediction {
    pub from_day: u32,
    pub horizon: u32,
    pub window: usize,
    pub prior: PredictionGrid,
    pub likelihood: PredictionGrid,
    pub posterior: PredictionGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan: Option<TrajectoryFan>,
    pub cumulative: EventProbabilities,
}

fn check_inputs(strata: &[MlmmFit], hazard: &HazardFit, patient: &PatientRecord, t: u32, horizon: u32, window: usize) -> Result<()> {
    if strata.len() != NUM_EVENTS {
        return Err(Error::InvalidConfig(format!("need {NUM_EVENTS} stratum fits, got {}", strata.len())));
    }
    if hazard.design.kind != HazardKind::Retrospective {
        return Err(Error::InvalidConfig("retrospective prediction needs a baseline-only hazard fit".into()));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("local window must be at least 1".into()));
    }
    if t >= horizon {
        return Err(Error::Precondition(format!("conditioning day {t} is not before the horizon {horizon}")));
    }
    if !patient.outcome.at_risk_after(t) {
        return Err(Error::Precondition(format!("patient `{}` is not at risk after day {t}", patient.id)));
    }
    Ok(())
}

/// `log L(τ, m; y)` over `τ = t+1..=horizon` from the local history.
///
/// The remainder cell (no event through the horizon) mixes the strata aligned
/// at `horizon + 1` with weights proportional to the day `horizon + 1` hazards.
pub fn likelihood_grid(
    strata: &[MlmmFit],
    hazard: &HazardFit,
    patient: &PatientRecord,
    t: u32,
    horizon: u32,
    window: usize,
) -> Result<PredictionGrid> {
    check_inputs(strata, hazard, patient, t, horizon, window)?;
    let local = local_restrict(&history(patient, t), window);
    let cells: Vec<(u32, usize)> = (t + 1..=horizon).flat_map(|d| (0..NUM_EVENTS).map(move |m| (d, m))).collect();
    let values = cells
        .par_iter()
        .map(|&(d, m)| loglik(&strata[m], patient, d, &local))
        .collect::<Result<Vec<f64>>>()?;
    let log_values = values.chunks(NUM_EVENTS).map(|c| [c[0], c[1], c[2]]).collect();
    let beyond = hazard.baseline_probs(patient, horizon + 1);
    let weights_total: f64 = beyond[1..].iter().sum();
    let mut terms = Vec::with_capacity(NUM_EVENTS);
    for m in 0..NUM_EVENTS {
        terms.push((beyond[m + 1] / weights_total).ln() + loglik(&strata[m], patient, horizon + 1, &local)?);
    }
    Ok(PredictionGrid { kind: GridKind::Likelihood, from_day: t, log_values, log_remainder: linalg::log_sum_exp(terms) })
}

/// Bayesian update of the ξ grid for a patient observed through day `t`.
///
/// `patient` is on the transformed scale; `transforms` maps the fan back to raw units.
pub fn retrospective_predict(
    strata: &[MlmmFit],
    hazard: &HazardFit,
    patient: &PatientRecord,
    t: u32,
    horizon: u32,
    transforms: &Transforms,
    options: &RetrospectiveOptions,
) -> Result<RetrospectivePrediction> {
    check_inputs(strata, hazard, patient, t, horizon, options.window)?;
    let prior = PredictionGrid::from_xi(&xi_grid(hazard, patient, t, horizon)?);
    let likelihood = likelihood_grid(strata, hazard, patient, t, horizon, options.window)?;
    let posterior = retrospective_update(&prior, &likelihood)?;
    let fan = if options.fan {
        Some(trajectory_fan(strata, patient, t, &posterior, transforms, options.window)?)
    } else {
        None
    };
    let cumulative = posterior.totals();
    Ok(RetrospectivePrediction { from_day: t, horizon, window: options.window, prior, likelihood, posterior, fan, cumulative })
}

fn trajectory_fan(
    strata: &[MlmmFit],
    patient: &PatientRecord,
    t: u32,
    posterior: &PredictionGrid,
    transforms: &Transforms,
    window: usize,
) -> Result<TrajectoryFan> {
    let local = local_restrict(&history(patient, t), window);
    let k = patient.num_biomarkers();
    let targets: Vec<(u32, usize)> = posterior.days().flat_map(|d| (0..NUM_EVENTS).map(move |m| (d, m))).collect();
    let paths = targets
        .par_iter()
        .map(|&(tau, m)| {
            let fit = &strata[m];
            let days: Vec<u32> = (t + 1..=tau).collect();
            let mut cells: Vec<Cell> = local.iter().map(|(c, _)| *c).collect();
            cells.extend(days.iter().flat_map(|&d| (0..k).map(move |b| Cell::new(d, b))));
            let belief = condition_on_past(&fit.joint(patient, &cells, TimeAxis::Retrospective { event_day: tau })?, &local)?;
            let series = (0..k)
                .map(|b| {
                    let mut s = FanSeries {
                        biomarker: fit.spec.biomarkers[b].clone(),
                        mean: vec![],
                        lower: vec![],
                        upper: vec![],
                        latent_mean: vec![],
                        latent_variance: vec![],
                    };
                    for &d in &days {
                        let i = belief.position(Cell::new(d, b)).expect("future cell");
                        let (mu, var) = (belief.mean[i], belief.variance(i).max(0.0));
                        let sd = var.sqrt();
                        s.mean.push(transforms.invert(b, mu));
                        s.lower.push(transforms.invert(b, mu - BAND_Z * sd));
                        s.upper.push(transforms.invert(b, mu + BAND_Z * sd));
                        s.latent_mean.push(mu);
                        s.latent_variance.push(var);
                    }
                    s
                })
                .collect();
            let idx = (tau - t - 1) as usize;
            Ok(FanPath {
                event_day: tau,
                event: EventType::from_index(m),
                weight: posterior.log_values[idx][m].exp(),
                days,
                series,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryFan { paths })
}
