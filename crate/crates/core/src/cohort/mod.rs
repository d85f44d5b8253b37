//! Patients, biomarkers and competing events.
//!
//! Day 0 is the admission baseline (`Y0`); days `1..=T` are in-hospital
//! observations. A patient either experiences one of the three terminal
//! events on day `T`, or is administratively censored at the horizon.

mod csv_io;
pub mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{export_csv, ingest_csv, ingest_dir, ingest_readers, PATIENTS_FILE, OBSERVATIONS_FILE, SCHEMA_FILE};
pub use synth::{generate_synthetic_cohort, GeneratorKind, GroundTruth, Preset, SynthConfig};

/// Number of competing event types.
pub const NUM_EVENTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Discharge = 1,
    Ventilation = 2,
    Death = 3,
}

impl EventType {
    pub const ALL: [EventType; NUM_EVENTS] = [EventType::Discharge, EventType::Ventilation, EventType::Death];

    /// Outcome code `m` (1-based; 0 is reserved for "no event").
    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based position in per-event arrays.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(EventType::Discharge),
            2 => Some(EventType::Ventilation),
            3 => Some(EventType::Death),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            EventType::Discharge => "discharge",
            EventType::Ventilation => "ventilation",
            EventType::Death => "death",
        }
    }

    /// Ventilation and death are the "severe" outcomes.
    pub fn is_severe(self) -> bool {
        !matches!(self, EventType::Discharge)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "discharge" => Some(EventType::Discharge),
            "2" | "ventilation" => Some(EventType::Ventilation),
            "3" | "death" => Some(EventType::Death),
            _ => None,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Event { kind: EventType, day: u32 },
    Censored,
}

impl Outcome {
    pub fn event_day(&self) -> Option<u32> {
        match self {
            Outcome::Event { day, .. } => Some(*day),
            Outcome::Censored => None,
        }
    }

    pub fn kind(&self) -> Option<EventType> {
        match self {
            Outcome::Event { kind, .. } => Some(*kind),
            Outcome::Censored => None,
        }
    }

    /// Still at risk (no event yet) at the end of day `t`.
    pub fn at_risk_after(&self, t: u32) -> bool {
        self.event_day().is_none_or(|d| d > t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerId {
    pub index: usize,
    pub name: String,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CovariateKind {
    Real,
    Categorical { levels: Vec<String>, reference: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl CovariateDef {
    pub fn real(name: &str) -> Self {
        Self { name: name.to_string(), kind: CovariateKind::Real }
    }

    pub fn categorical(name: &str, levels: &[&str], reference: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
                reference: reference.to_string(),
            },
        }
    }

    pub fn parse_value(&self, raw: &str) -> std::result::Result<CovariateValue, String> {
        match &self.kind {
            CovariateKind::Real => raw
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(CovariateValue::Real)
                .ok_or_else(|| format!("covariate `{}`: `{raw}` is not a finite number", self.name)),
            CovariateKind::Categorical { levels, .. } => {
                let v = raw.trim();
                if levels.iter().any(|l| l == v) {
                    Ok(CovariateValue::Level(v.to_string()))
                } else {
                    Err(format!("covariate `{}`: unknown level `{v}`", self.name))
                }
            }
        }
    }

    pub fn accepts(&self, value: &CovariateValue) -> bool {
        match (&self.kind, value) {
            (CovariateKind::Real, CovariateValue::Real(v)) => v.is_finite(),
            (CovariateKind::Categorical { levels, .. }, CovariateValue::Level(l)) => levels.contains(l),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Real(f64),
    Level(String),
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Real(v) => write!(f, "{v}"),
            CovariateValue::Level(l) => f.write_str(l),
        }
    }
}

/// Everything needed to interpret a cohort's files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub biomarkers: Vec<BiomarkerId>,
    pub covariates: Vec<CovariateDef>,
    pub horizon: u32,
}

impl CohortSchema {
    pub fn num_biomarkers(&self) -> usize {
        self.biomarkers.len()
    }

    pub fn biomarker_index(&self, name: &str) -> Option<usize> {
        self.biomarkers.iter().position(|b| b.name == name)
    }

    pub fn biomarker_names(&self) -> Vec<String> {
        self.biomarkers.iter().map(|b| b.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.biomarkers.is_empty() {
            return Err(Error::SchemaMismatch("at least one biomarker is required".into()));
        }
        let mut seen = HashSet::new();
        for (i, b) in self.biomarkers.iter().enumerate() {
            if b.index != i {
                return Err(Error::SchemaMismatch(format!("biomarker `{}` has index {}, expected {i}", b.name, b.index)));
            }
            if !seen.insert(b.name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate biomarker name `{}`", b.name)));
            }
        }
        for c in &self.covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate column name `{}`", c.name)));
            }
            if let CovariateKind::Categorical { levels, reference } = &c.kind {
                if !levels.contains(reference) {
                    return Err(Error::SchemaMismatch(format!(
                        "covariate `{}`: reference level `{reference}` is not among its levels",
                        c.name
                    )));
                }
            }
        }
        if self.horizon == 0 {
            return Err(Error::SchemaMismatch("horizon must be at least 1 day".into()));
        }
        Ok(())
    }
}

/// One hospitalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub covariates: Vec<CovariateValue>,
    /// Baseline (day 0) biomarker values, one per biomarker.
    pub baseline: Vec<f64>,
    /// `daily[k][t - 1]` is biomarker `k` on day `t`, for `t = 1..=horizon`.
    pub daily: Vec<Vec<Option<f64>>>,
    pub outcome: Outcome,
}

impl PatientRecord {
    pub fn new(id: &str, covariates: Vec<CovariateValue>, baseline: Vec<f64>, horizon: u32, outcome: Outcome) -> Self {
        let k = baseline.len();
        Self {
            id: id.to_string(),
            covariates,
            baseline,
            daily: vec![vec![None; horizon as usize]; k],
            outcome,
        }
    }

    pub fn num_biomarkers(&self) -> usize {
        self.baseline.len()
    }

    pub fn horizon(&self) -> u32 {
        self.daily.first().map_or(0, |v| v.len() as u32)
    }

    pub fn value(&self, biomarker: usize, day: u32) -> Option<f64> {
        if day == 0 {
            return Some(self.baseline[biomarker]);
        }
        self.daily[biomarker].get(day as usize - 1).copied().flatten()
    }

    pub fn set_value(&mut self, biomarker: usize, day: u32, value: Option<f64>) {
        self.daily[biomarker][day as usize - 1] = value;
    }

    /// Last day of follow-up: the event day, or the horizon when censored.
    pub fn last_day(&self) -> u32 {
        self.outcome.event_day().unwrap_or_else(|| self.horizon())
    }

    /// Observed `(day, biomarker, value)` cells on days `1..=through`.
    pub fn observed_cells(&self, through: u32) -> Vec<(u32, usize, f64)> {
        let mut out = Vec::new();
        for (k, series) in self.daily.iter().enumerate() {
            for (i, v) in series.iter().enumerate().take(through as usize) {
                if let Some(v) = v {
                    out.push((i as u32 + 1, k, *v));
                }
            }
        }
        out
    }

    pub fn num_observed(&self) -> usize {
        self.daily.iter().flatten().filter(|v| v.is_some()).count()
    }

    /// Copy with every daily value after `day` removed.
    pub fn truncated(&self, day: u32) -> Self {
        let mut out = self.clone();
        for series in &mut out.daily {
            for v in series.iter_mut().skip(day as usize) {
                *v = None;
            }
        }
        out
    }

    /// Map every biomarker value (baseline included) through `f(k, v)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for (k, b) in out.baseline.iter_mut().enumerate() {
            *b = f(k, *b);
        }
        for (k, series) in out.daily.iter_mut().enumerate() {
            for v in series.iter_mut().flatten() {
                *v = f(k, *v);
            }
        }
        out
    }

    pub fn validate(&self, schema: &CohortSchema) -> Result<()> {
        let k = schema.num_biomarkers();
        if self.baseline.len() != k || self.daily.len() != k {
            return Err(Error::SchemaMismatch(format!("patient `{}` has the wrong number of biomarkers", self.id)));
        }
        if self.covariates.len() != schema.covariates.len() {
            return Err(Error::SchemaMismatch(format!("patient `{}` has the wrong number of covariates", self.id)));
        }
        for (def, v) in schema.covariates.iter().zip(&self.covariates) {
            if !def.accepts(v) {
                return Err(Error::SchemaMismatch(format!("patient `{}`: invalid value `{v}` for `{}`", self.id, def.name)));
            }
        }
        if self.baseline.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaMismatch(format!("patient `{}` has a non-finite baseline value", self.id)));
        }
        if self.daily.iter().any(|s| s.len() != schema.horizon as usize) {
            return Err(Error::SchemaMismatch(format!("patient `{}` has a grid not matching the horizon", self.id)));
        }
        if let Some(day) = self.outcome.event_day() {
            if day == 0 || day > schema.horizon {
                return Err(Error::SchemaMismatch(format!(
                    "patient `{}`: event day {day} outside 1..={}",
                    self.id, schema.horizon
                )));
            }
            for (kk, series) in self.daily.iter().enumerate() {
                if let Some(pos) = series.iter().skip(day as usize).position(Option::is_some) {
                    return Err(Error::PostEventObservation {
                        id: self.id.clone(),
                        day: day + 1 + pos as u32,
                        biomarker: schema.biomarkers[kk].name.clone(),
                        event_day: day,
                    });
                }
            }
        }
        if self.num_observed() == 0 {
            return Err(Error::EmptyHistory(self.id.clone()));
        }
        Ok(())
    }
}

/// A validated cohort. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub schema: CohortSchema,
    pub patients: Vec<PatientRecord>,
}

impl CohortDataset {
    pub fn new(schema: CohortSchema, patients: Vec<PatientRecord>) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for p in &patients {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate patient id `{}`", p.id)));
            }
            p.validate(&schema)?;
        }
        Ok(Self { schema, patients })
    }

    pub fn horizon(&self) -> u32 {
        self.schema.horizon
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Patients still at risk after day `t` (event day later than `t`, or censored).
    pub fn at_risk(&self, t: u32) -> CohortDataset {
        CohortDataset {
            schema: self.schema.clone(),
            patients: self.patients.iter().filter(|p| p.outcome.at_risk_after(t)).cloned().collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> CohortDataset {
        CohortDataset {
            schema: self.schema.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }

    /// Count of patients per event type, plus censored, in that order.
    pub fn outcome_counts(&self) -> [usize; NUM_EVENTS + 1] {
        let mut counts = [0; NUM_EVENTS + 1];
        for p in &self.patients {
            match p.outcome.kind() {
                Some(kind) => counts[kind.index()] += 1,
                None => counts[NUM_EVENTS] += 1,
            }
        }
        counts
    }
}
