#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use dynrisk_core::cohort::{generate_synthetic_cohort, CohortDataset, CovariateValue, GeneratorKind, PatientRecord, Preset, SynthConfig};
use dynrisk_core::model::ModelConfig;
use dynrisk_service::{ModelBundle, ObservationInput, PatientInput};

pub fn cohort() -> &'static CohortDataset {
    static DATA: OnceLock<CohortDataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = SynthConfig::preset(Preset::Balanced, GeneratorKind::Retrospective, 300, 5);
        generate_synthetic_cohort(&cfg).unwrap().0
    })
}

pub fn bundle() -> &'static ModelBundle {
    static BUNDLE: OnceLock<ModelBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| ModelBundle::fit(cohort(), &ModelConfig::default()).unwrap())
}

pub fn observation(record: &PatientRecord, names: &[String], day: u32) -> Option<ObservationInput> {
    let values: BTreeMap<String, f64> =
        names.iter().enumerate().filter_map(|(k, n)| record.value(k, day).map(|v| (n.clone(), v))).collect();
    (!values.is_empty()).then_some(ObservationInput { day, values })
}

/// Session input for cohort patient `i` with its observations through `through`.
pub fn patient_input(i: usize, through: u32) -> PatientInput {
    let ds = cohort();
    let record = &ds.patients[i];
    let names = ds.schema.biomarker_names();
    let covariates = ds
        .schema
        .covariates
        .iter()
        .zip(&record.covariates)
        .map(|(def, v)| {
            let value = match v {
                CovariateValue::Real(x) => serde_json::json!(x),
                CovariateValue::Level(l) => serde_json::json!(l),
            };
            (def.name.clone(), value)
        })
        .collect();
    let baseline = names.iter().cloned().zip(record.baseline.iter().copied()).collect();
    let observations = (1..=through.min(record.last_day())).filter_map(|d| observation(record, &names, d)).collect();
    PatientInput { id: format!("pt-{i}"), covariates, baseline, observations }
}

/// Index of a cohort patient still in hospital after `day` with values on days 1..=day.
pub fn long_stay(day: u32) -> usize {
    let ds = cohort();
    ds.patients
        .iter()
        .position(|p| {
            p.outcome.at_risk_after(day + 1)
                && (1..=day + 1).all(|d| (0..ds.schema.num_biomarkers()).any(|k| p.value(k, d).is_some()))
        })
        .expect("a long-stay patient")
}
