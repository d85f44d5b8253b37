//! JSON form of a patient as entered day by day.

use std::collections::BTreeMap;

use dynrisk_core::cohort::{CohortSchema, CovariateKind, CovariateValue, Outcome, PatientRecord};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// Biomarker values recorded on one day, keyed by biomarker name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationInput {
    pub day: u32,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientInput {
    pub id: String,
    /// Numbers for real covariates, level names for categorical ones.
    pub covariates: BTreeMap<String, serde_json::Value>,
    /// Admission value of every biomarker.
    pub baseline: BTreeMap<String, f64>,
    #[serde(default)]
    pub observations: Vec<ObservationInput>,
}

fn bad(msg: String) -> ServiceError {
    ServiceError::BadRequest(msg)
}

pub fn check_id(id: &str) -> ServiceResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(bad(format!("invalid patient id `{id}`: use letters, digits, `-`, `_` or `.`")))
    }
}

impl PatientInput {
    /// Record without daily values; the outcome is unknown (at risk).
    pub fn baseline_record(&self, schema: &CohortSchema) -> ServiceResult<PatientRecord> {
        check_id(&self.id)?;
        for name in self.covariates.keys() {
            if !schema.covariates.iter().any(|c| &c.name == name) {
                return Err(bad(format!("unknown covariate `{name}`")));
            }
        }
        let covariates = schema
            .covariates
            .iter()
            .map(|def| {
                let raw = self.covariates.get(&def.name).ok_or_else(|| bad(format!("missing covariate `{}`", def.name)))?;
                let value = match (raw, &def.kind) {
                    (serde_json::Value::Number(n), CovariateKind::Real) => {
                        CovariateValue::Real(n.as_f64().ok_or_else(|| bad(format!("covariate `{}` is not a number", def.name)))?)
                    }
                    (serde_json::Value::String(s), _) => def.parse_value(s).map_err(bad)?,
                    (serde_json::Value::Number(n), _) => def.parse_value(&n.to_string()).map_err(bad)?,
                    _ => return Err(bad(format!("covariate `{}` must be a number or a string", def.name))),
                };
                Ok(value)
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        for name in self.baseline.keys() {
            if schema.biomarker_index(name).is_none() {
                return Err(bad(format!("unknown biomarker `{name}`")));
            }
        }
        let baseline = schema
            .biomarkers
            .iter()
            .map(|b| {
                let v = *self.baseline.get(&b.name).ok_or_else(|| bad(format!("missing baseline value for `{}`", b.name)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("baseline value for `{}` is not finite", b.name)))
                }
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        Ok(PatientRecord::new(&self.id, covariates, baseline, schema.horizon, Outcome::Censored))
    }

    /// Full record; observation days must increase strictly.
    pub fn to_record(&self, schema: &CohortSchema) -> ServiceResult<PatientRecord> {
        let mut record = self.baseline_record(schema)?;
        let mut last = 0;
        for obs in &self.observations {
            apply_observation(&mut record, &mut last, obs, schema)?;
        }
        Ok(record)
    }
}

/// Appends one day; days must be in `1..=horizon` and after `last_day`.
pub fn apply_observation(record: &mut PatientRecord, last_day: &mut u32, obs: &ObservationInput, schema: &CohortSchema) -> ServiceResult<()> {
    if obs.day == 0 || obs.day > schema.horizon {
        return Err(bad(format!("observation day {} is outside 1..={}", obs.day, schema.horizon)));
    }
    if obs.values.is_empty() {
        return Err(bad("observation has no values".into()));
    }
    let mut cells = Vec::with_capacity(obs.values.len());
    for (name, &v) in &obs.values {
        let k = schema.biomarker_index(name).ok_or_else(|| bad(format!("unknown biomarker `{name}`")))?;
        if !v.is_finite() {
            return Err(bad(format!("value for `{name}` is not finite")));
        }
        cells.push((k, v));
    }
    if obs.day <= *last_day {
        return Err(ServiceError::Conflict(format!("observation for day {} arrives after day {}", obs.day, *last_day)));
    }
    for (k, v) in cells {
        record.set_value(k, obs.day, Some(v));
    }
    *last_day = obs.day;
    Ok(())
}
