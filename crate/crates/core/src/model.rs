//! Fitting every component from one training cohort and predicting with it.

use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, EventType, PatientRecord};
use crate::error::{Error, Result};
use crate::hazards::{fit_hazards, HazardDesign, HazardFit, HazardKind, MultinomialOptions};
use crate::mlmm::{self, default_spec, FitMode, FitOptions, MlmmFit};
use crate::prediction::{
    prospective_predict, retrospective_predict, Pathway, Prediction, RetrospectiveOptions, DEFAULT_SIMULATIONS,
    DEFAULT_WINDOW,
};
use crate::transforms::Transforms;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Degrees of freedom of the mixed-model time spline.
    pub spline_df: usize,
    /// Degrees of freedom of the baseline-hazard day spline.
    pub hazard_df: usize,
    /// Gaussianize biomarkers before fitting; otherwise use raw values.
    pub gaussianize: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub min_stratum: usize,
    pub ridge: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            spline_df: 4,
            hazard_df: 4,
            gaussianize: true,
            max_iter: fit.max_iter,
            tol: fit.tol,
            min_stratum: fit.min_stratum,
            ridge: MultinomialOptions::default().ridge,
        }
    }
}

impl ModelConfig {
    fn fit_options(&self) -> FitOptions {
        FitOptions { max_iter: self.max_iter, tol: self.tol, min_stratum: self.min_stratum, keep_trace: false }
    }

    fn hazard_options(&self) -> MultinomialOptions {
        MultinomialOptions { ridge: self.ridge, ..MultinomialOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProspectiveModel {
    pub mlmm: MlmmFit,
    pub hazard: HazardFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrospectiveModel {
    /// Discharge, ventilation and death strata, in that order.
    pub strata: Vec<MlmmFit>,
    pub hazard: HazardFit,
}

/// Components needed by one or both pathways; all share the same transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub config: ModelConfig,
    pub horizon: u32,
    pub transforms: Transforms,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prospective: Option<ProspectiveModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrospective: Option<RetrospectiveModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub pathway: Pathway,
    pub simulations: usize,
    pub window: usize,
    pub seed: u64,
    pub fan: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { pathway: Pathway::Retrospective, simulations: DEFAULT_SIMULATIONS, window: DEFAULT_WINDOW, seed: 1, fan: true }
    }
}

pub fn fit_prospective(data: &CohortDataset, config: &ModelConfig) -> Result<ProspectiveModel> {
    let spec = default_spec(data, FitMode::Prospective, config.spline_df)?;
    let mlmm = mlmm::fit(data, FitMode::Prospective, &spec, &config.fit_options())?;
    let design = HazardDesign::for_dataset(HazardKind::Prospective, data, config.hazard_df)?;
    let hazard = fit_hazards(data, design, &config.hazard_options())?;
    Ok(ProspectiveModel { mlmm, hazard })
}

pub fn fit_retrospective(data: &CohortDataset, config: &ModelConfig) -> Result<RetrospectiveModel> {
    let strata = EventType::ALL
        .iter()
        .map(|&m| {
            let mode = FitMode::Retrospective(m);
            let selected = mode.select(data).len();
            if selected < config.min_stratum {
                return Err(Error::InsufficientStratum { stratum: m.name().into(), got: selected, needed: config.min_stratum });
            }
            let spec = default_spec(data, mode, config.spline_df)?;
            mlmm::fit(data, mode, &spec, &config.fit_options())
        })
        .collect::<Result<Vec<_>>>()?;
    let design = HazardDesign::for_dataset(HazardKind::Retrospective, data, config.hazard_df)?;
    let hazard = fit_hazards(data, design, &config.hazard_options())?;
    Ok(RetrospectiveModel { strata, hazard })
}

impl FittedModel {
    /// Fits the transforms and the components of the requested pathways.
    pub fn fit(dataset: &CohortDataset, config: &ModelConfig, pathways: &[Pathway]) -> Result<Self> {
        let transforms = if config.gaussianize {
            Transforms::fit_pooled(dataset)?
        } else {
            Transforms::identity(dataset.schema.num_biomarkers())
        };
        let data = transforms.apply_dataset(dataset);
        let prospective = pathways.contains(&Pathway::Prospective).then(|| fit_prospective(&data, config)).transpose()?;
        let retrospective = pathways.contains(&Pathway::Retrospective).then(|| fit_retrospective(&data, config)).transpose()?;
        Ok(Self { config: config.clone(), horizon: dataset.horizon(), transforms, prospective, retrospective })
    }

    pub fn fit_all(dataset: &CohortDataset, config: &ModelConfig) -> Result<Self> {
        Self::fit(dataset, config, &[Pathway::Prospective, Pathway::Retrospective])
    }

    /// Every mixed-model and hazard fit reached its convergence criterion.
    pub fn converged(&self) -> bool {
        let p = self.prospective.as_ref().is_none_or(|p| p.mlmm.diagnostics.converged && p.hazard.diagnostics.converged);
        let r = self
            .retrospective
            .as_ref()
            .is_none_or(|r| r.strata.iter().all(|f| f.diagnostics.converged) && r.hazard.diagnostics.converged);
        p && r
    }

    /// Forecast for a raw-scale patient record using its data through day `t` only.
    pub fn predict(&self, patient: &PatientRecord, t: u32, options: &PredictOptions) -> Result<Prediction> {
        if !patient.outcome.at_risk_after(t) {
            return Err(Error::Precondition(format!("patient `{}` is not at risk after day {t}", patient.id)));
        }
        let seen = self.transforms.apply_patient(&patient.truncated(t));
        match options.pathway {
            Pathway::Prospective => {
                let m = self.prospective.as_ref().ok_or_else(|| missing("prospective"))?;
                prospective_predict(&m.mlmm, &m.hazard, &seen, t, options.simulations, self.horizon, options.seed)
                    .map(Prediction::Prospective)
            }
            Pathway::Retrospective => {
                let m = self.retrospective.as_ref().ok_or_else(|| missing("retrospective"))?;
                let opts = RetrospectiveOptions { window: options.window, fan: options.fan };
                retrospective_predict(&m.strata, &m.hazard, &seen, t, self.horizon, &self.transforms, &opts)
                    .map(Prediction::Retrospective)
            }
        }
    }
}

fn missing(which: &str) -> Error {
    Error::InvalidConfig(format!("model has no {which} components"))
}
