//! CSV interchange.
//!
//! `patients.csv`: `id,<covariates...>,Y0_<biomarker>...,event,event_day`
//! `observations.csv`: `id,day,biomarker,value` (long format)
//!
//! Events are written as codes `1`/`2`/`3`, censoring as `0` with an empty
//! `event_day`. A baseline value may instead be supplied as a day-0 row in
//! the observations file when its `Y0_` cell is left empty.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{CohortDataset, CohortSchema, EventType, Outcome, PatientRecord};
use crate::error::{Error, Result};

pub const PATIENTS_FILE: &str = "patients.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const SCHEMA_FILE: &str = "schema.json";

fn patients_header(schema: &CohortSchema) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend(schema.covariates.iter().map(|c| c.name.clone()));
    h.extend(schema.biomarkers.iter().map(|b| format!("Y0_{}", b.name)));
    h.push("event".into());
    h.push("event_day".into());
    h
}

pub fn ingest_csv(patients_file: &Path, observations_file: &Path, schema: &CohortSchema) -> Result<CohortDataset> {
    let p = File::open(patients_file)?;
    let o = File::open(observations_file)?;
    ingest_readers(
        p,
        &patients_file.display().to_string(),
        o,
        &observations_file.display().to_string(),
        schema,
    )
}

/// Read `schema.json`, `patients.csv` and `observations.csv` from a directory.
pub fn ingest_dir(dir: &Path) -> Result<CohortDataset> {
    let schema: CohortSchema = serde_json::from_reader(File::open(dir.join(SCHEMA_FILE))?)?;
    ingest_csv(&dir.join(PATIENTS_FILE), &dir.join(OBSERVATIONS_FILE), &schema)
}

pub fn ingest_readers<P: Read, O: Read>(
    patients: P,
    patients_name: &str,
    observations: O,
    observations_name: &str,
    schema: &CohortSchema,
) -> Result<CohortDataset> {
    schema.validate()?;
    let k = schema.num_biomarkers();
    let horizon = schema.horizon;
    let malformed = |file: &str, line: u64, reason: String| Error::MalformedRow { file: file.to_string(), line, reason };

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(patients);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected = patients_header(schema);
    if header != expected {
        return Err(Error::SchemaMismatch(format!(
            "{patients_name}: header `{}` does not match expected `{}`",
            header.join(","),
            expected.join(",")
        )));
    }

    let mut records: Vec<PatientRecord> = Vec::new();
    let mut missing_baseline: Vec<Vec<bool>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != expected.len() {
            return Err(malformed(patients_name, line, format!("expected {} fields, found {}", expected.len(), row.len())));
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(malformed(patients_name, line, "empty patient id".into()));
        }
        if by_id.contains_key(&id) {
            return Err(malformed(patients_name, line, format!("duplicate patient id `{id}`")));
        }
        let nc = schema.covariates.len();
        let mut covariates = Vec::with_capacity(nc);
        for (j, def) in schema.covariates.iter().enumerate() {
            covariates.push(def.parse_value(&row[1 + j]).map_err(|r| malformed(patients_name, line, r))?);
        }
        let mut baseline = vec![f64::NAN; k];
        let mut missing = vec![false; k];
        for kk in 0..k {
            let cell = row[1 + nc + kk].trim();
            if cell.is_empty() {
                missing[kk] = true;
            } else {
                baseline[kk] = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(patients_name, line, format!("bad baseline value `{cell}`")))?;
            }
        }
        let event_cell = row[1 + nc + k].trim();
        let day_cell = row[2 + nc + k].trim();
        let outcome = if event_cell == "0" || event_cell.eq_ignore_ascii_case("censored") {
            if !day_cell.is_empty() {
                return Err(malformed(patients_name, line, "censored patient with an event day".into()));
            }
            Outcome::Censored
        } else {
            let kind = EventType::parse(event_cell)
                .ok_or_else(|| malformed(patients_name, line, format!("unknown event `{event_cell}`")))?;
            let day: u32 = day_cell
                .parse()
                .map_err(|_| malformed(patients_name, line, format!("bad event day `{day_cell}`")))?;
            if day == 0 || day > horizon {
                return Err(malformed(patients_name, line, format!("event day {day} outside 1..={horizon}")));
            }
            Outcome::Event { kind, day }
        };
        by_id.insert(id.clone(), records.len());
        records.push(PatientRecord::new(&id, covariates, baseline, horizon, outcome));
        missing_baseline.push(missing);
    }

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(observations);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != ["id", "day", "biomarker", "value"] {
        return Err(Error::SchemaMismatch(format!(
            "{observations_name}: header `{}` does not match `id,day,biomarker,value`",
            header.join(",")
        )));
    }
    let mut seen: HashSet<(usize, u32, usize)> = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 4 {
            return Err(malformed(observations_name, line, format!("expected 4 fields, found {}", row.len())));
        }
        let id = row[0].trim();
        let &pi = by_id.get(id).ok_or_else(|| Error::UnknownPatient {
            id: id.to_string(),
            file: observations_name.to_string(),
            line,
        })?;
        let day: u32 = row[1]
            .trim()
            .parse()
            .map_err(|_| malformed(observations_name, line, format!("bad day `{}`", &row[1])))?;
        if day > horizon {
            return Err(malformed(observations_name, line, format!("day {day} outside 0..={horizon}")));
        }
        let name = row[2].trim();
        let kk = schema.biomarker_index(name).ok_or_else(|| Error::UnknownBiomarker {
            name: name.to_string(),
            file: observations_name.to_string(),
            line,
        })?;
        let value: f64 = row[3]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| malformed(observations_name, line, format!("bad value `{}`", &row[3])))?;
        let dup = || Error::DuplicateObservation { id: id.to_string(), day, biomarker: name.to_string() };
        if !seen.insert((pi, day, kk)) {
            return Err(dup());
        }
        let rec = &mut records[pi];
        if day == 0 {
            if !missing_baseline[pi][kk] {
                return Err(dup());
            }
            rec.baseline[kk] = value;
            missing_baseline[pi][kk] = false;
        } else {
            if let Some(ev) = rec.outcome.event_day() {
                if day > ev {
                    return Err(Error::PostEventObservation {
                        id: id.to_string(),
                        day,
                        biomarker: name.to_string(),
                        event_day: ev,
                    });
                }
            }
            rec.set_value(kk, day, Some(value));
        }
    }
    for (rec, missing) in records.iter().zip(&missing_baseline) {
        if let Some(kk) = missing.iter().position(|&m| m) {
            return Err(Error::SchemaMismatch(format!(
                "patient `{}` has no baseline value for `{}`",
                rec.id, schema.biomarkers[kk].name
            )));
        }
    }
    CohortDataset::new(schema.clone(), records)
}

/// Write `schema.json`, `patients.csv` and `observations.csv` into `dir`.
pub fn export_csv(dataset: &CohortDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let schema = &dataset.schema;
    let mut f = File::create(dir.join(SCHEMA_FILE))?;
    serde_json::to_writer_pretty(&mut f, schema)?;
    writeln!(f)?;

    let mut w = csv::Writer::from_path(dir.join(PATIENTS_FILE))?;
    w.write_record(patients_header(schema))?;
    for p in &dataset.patients {
        let mut row = vec![p.id.clone()];
        row.extend(p.covariates.iter().map(|c| c.to_string()));
        row.extend(p.baseline.iter().map(|v| v.to_string()));
        match p.outcome {
            Outcome::Event { kind, day } => {
                row.push(kind.code().to_string());
                row.push(day.to_string());
            }
            Outcome::Censored => {
                row.push("0".into());
                row.push(String::new());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(OBSERVATIONS_FILE))?;
    w.write_record(["id", "day", "biomarker", "value"])?;
    for p in &dataset.patients {
        for day in 1..=schema.horizon {
            for (kk, b) in schema.biomarkers.iter().enumerate() {
                if let Some(v) = p.value(kk, day) {
                    w.write_record([p.id.as_str(), &day.to_string(), b.name.as_str(), &v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{BiomarkerId, CovariateDef};

    fn schema() -> CohortSchema {
        CohortSchema {
            biomarkers: vec![
                BiomarkerId { index: 0, name: "sf_ratio".into(), unit: "".into() },
                BiomarkerId { index: 1, name: "pulse".into(), unit: "bpm".into() },
            ],
            covariates: vec![CovariateDef::real("age"), CovariateDef::categorical("sex", &["F", "M"], "F")],
            horizon: 20,
        }
    }

    const PATIENTS: &str = "id,age,sex,Y0_sf_ratio,Y0_pulse,event,event_day\n\
                            p1,70,F,300,88,1,3\n\
                            p2,55,M,250,95,0,\n";

    fn observations(extra: &str) -> String {
        let mut s = String::from("id,day,biomarker,value\n");
        for d in 1..=3 {
            s += &format!("p1,{d},sf_ratio,{}\np1,{d},pulse,{}\n", 300 + d, 90 - d);
        }
        for d in 1..=20 {
            s += &format!("p2,{d},sf_ratio,{}\np2,{d},pulse,{}\n", 250 + d, 95 + d);
        }
        s + extra
    }

    fn ingest(obs: &str) -> Result<CohortDataset> {
        ingest_readers(PATIENTS.as_bytes(), "patients.csv", obs.as_bytes(), "observations.csv", &schema())
    }

    #[test]
    fn complete_grids_are_ingested() {
        let ds = ingest(&observations("")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.horizon(), 20);
        assert_eq!(ds.patients[0].value(1, 2), Some(88.0));
        assert_eq!(ds.patients[1].outcome, Outcome::Censored);
    }

    #[test]
    fn day_beyond_horizon_is_malformed() {
        let err = ingest(&observations("p2,25,pulse,80\n")).unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 48),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_is_named() {
        let err = ingest(&observations("p1,3,pulse,80\n")).unwrap_err();
        assert!(err.to_string().contains("(p1, day 3, pulse)"), "{err}");
    }

    #[test]
    fn unknown_biomarker_and_post_event_rows() {
        assert!(matches!(ingest(&observations("p1,2,lactate,1\n")), Err(Error::UnknownBiomarker { .. })));
        assert!(matches!(
            ingest(&observations("p1,4,pulse,80\n")),
            Err(Error::PostEventObservation { day: 4, event_day: 3, .. })
        ));
    }

    #[test]
    fn header_mismatch_is_reported() {
        let bad = PATIENTS.replace("Y0_pulse", "Y0_hr");
        let err = ingest_readers(bad.as_bytes(), "p", observations("").as_bytes(), "o", &schema()).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let ds = ingest(&observations("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&ds, dir.path()).unwrap();
        assert_eq!(ingest_dir(dir.path()).unwrap(), ds);
    }
}
