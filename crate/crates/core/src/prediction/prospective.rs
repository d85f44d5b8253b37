use std::collections::HashMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EventProbabilities;
use crate::cohort::{PatientRecord, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::hazards::{build_features_with, xi_from_hazards, HazardFit, HazardKind, XiGrid};
use crate::linalg;
use crate::mlmm::{condition_on_past, history, MlmmFit};
use crate::transforms::{Cell, TimeAxis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProspectiveForecast {
    pub from_day: u32,
    pub horizon: u32,
    pub simulations: usize,
    pub seed: u64,
    /// Path-averaged `(π̄_0, ..., π̄_M)` for days `from_day+1..=horizon`.
    pub hazards: Vec<[f64; NUM_EVENTS + 1]>,
    /// Probability of each event type by each future day.
    pub cumulative_by_day: Vec<[f64; NUM_EVENTS]>,
    /// Probability of no event through each future day.
    pub survival: Vec<f64>,
    pub cumulative: EventProbabilities,
}

impl ProspectiveForecast {
    pub fn event_distribution(&self) -> XiGrid {
        xi_from_hazards(self.from_day, &self.hazards)
    }
}

/// Monte-Carlo forecast from day `t` with `simulations` biomarker paths.
///
/// Path `j` draws from ChaCha8 stream `j` of `seed`, so the result does not
/// depend on thread scheduling.
pub fn prospective_predict(
    mlmm: &MlmmFit,
    hazard: &HazardFit,
    patient: &PatientRecord,
    t: u32,
    simulations: usize,
    horizon: u32,
    seed: u64,
) -> Result<ProspectiveForecast> {
    if simulations == 0 {
        return Err(Error::InvalidConfig("number of simulations must be positive".into()));
    }
    if t >= horizon {
        return Err(Error::Precondition(format!("conditioning day {t} is not before the horizon {horizon}")));
    }
    if !patient.outcome.at_risk_after(t) {
        return Err(Error::Precondition(format!("patient `{}` is not at risk after day {t}", patient.id)));
    }
    if hazard.design.kind != HazardKind::Prospective {
        return Err(Error::InvalidConfig("prospective forecast needs a prospective hazard fit".into()));
    }
    let k = patient.num_biomarkers();
    let past = history(patient, t);
    // features of day τ use days < τ, so the last simulated day is horizon - 1
    let future: Vec<Cell> = (t + 1..horizon).flat_map(|d| (0..k).map(move |b| Cell::new(d, b))).collect();
    let mut cells: Vec<Cell> = past.iter().map(|(c, _)| *c).collect();
    cells.extend(&future);
    let belief = condition_on_past(&mlmm.joint(patient, &cells, TimeAxis::Prospective)?, &past)?;
    let root = linalg::sqrt_psd(&belief.cov);
    let observed: HashMap<Cell, f64> = past.iter().copied().collect();
    let baseline_rows: Vec<Vec<f64>> = (t + 1..=horizon).map(|d| hazard.design.baseline_row(patient, d)).collect();

    let path_hazards = |j: usize| -> Vec<[f64; NUM_EVENTS + 1]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let z = DVector::from_fn(belief.len(), |_, _| StandardNormal.sample(&mut rng));
        let draw = &belief.mean + &root * z;
        let simulated: HashMap<Cell, f64> = belief.labels.iter().copied().zip(draw.iter().copied()).collect();
        let lookup = |b: usize, d: u32| {
            let c = Cell::new(d, b);
            if d <= t {
                observed.get(&c).copied()
            } else {
                simulated.get(&c).copied()
            }
        };
        (t + 1..=horizon)
            .zip(&baseline_rows)
            .map(|(d, base)| {
                let mut row = base.clone();
                row.extend(build_features_with(&patient.baseline, d, lookup).values);
                hazard.probs(&row)
            })
            .collect()
    };
    let paths: Vec<Vec<[f64; NUM_EVENTS + 1]>> = (0..simulations).into_par_iter().map(path_hazards).collect();

    // running mean in path order: identical paths average to themselves exactly
    let mut mean = paths[0].clone();
    for (j, path) in paths.iter().enumerate().skip(1) {
        for (acc, h) in mean.iter_mut().zip(path) {
            for c in 0..=NUM_EVENTS {
                acc[c] += (h[c] - acc[c]) / (j + 1) as f64;
            }
        }
    }
    Ok(summarize(t, horizon, simulations, seed, mean))
}

fn summarize(t: u32, horizon: u32, simulations: usize, seed: u64, hazards: Vec<[f64; NUM_EVENTS + 1]>) -> ProspectiveForecast {
    let xi = xi_from_hazards(t, &hazards);
    let cumulative_by_day = super::cumulative_by_day(&xi);
    let mut surv = 1.0;
    let survival = hazards
        .iter()
        .map(|h| {
            surv *= h[0];
            surv
        })
        .collect();
    let last = cumulative_by_day.last().copied().unwrap_or([0.0; NUM_EVENTS]);
    ProspectiveForecast {
        from_day: t,
        horizon,
        simulations,
        seed,
        hazards,
        cumulative_by_day,
        survival,
        cumulative: EventProbabilities::new(last, xi.remainder),
    }
}
