//! Patient sessions persisted as append-only JSON-lines logs, one file per patient.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dynrisk_core::cohort::{CohortSchema, PatientRecord};
use dynrisk_core::prediction::Pathway;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::patient::{apply_observation, check_id, ObservationInput, PatientInput};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogEntry {
    Created(PatientInput),
    Observation(ObservationInput),
}

/// Parameters that determine a prediction for a fixed session state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub day: u32,
    pub pathway: Pathway,
    pub a: usize,
    pub simulations: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct Session {
    pub input: PatientInput,
    pub record: PatientRecord,
    pub last_day: u32,
    /// Bumped on every append; guards cache writes from stale computations.
    pub revision: u64,
    cache: HashMap<CacheKey, Arc<Vec<u8>>>,
}

impl Session {
    fn new(input: PatientInput, schema: &CohortSchema) -> ServiceResult<Self> {
        let mut base = input.clone();
        base.observations.clear();
        let mut s = Session { record: base.baseline_record(schema)?, input: base, last_day: 0, revision: 0, cache: HashMap::new() };
        for obs in &input.observations {
            s.apply(obs.clone(), schema)?;
        }
        Ok(s)
    }

    fn apply(&mut self, obs: ObservationInput, schema: &CohortSchema) -> ServiceResult<()> {
        apply_observation(&mut self.record, &mut self.last_day, &obs, schema)?;
        self.input.observations.push(obs);
        self.revision += 1;
        self.cache.clear();
        Ok(())
    }

    pub fn cached(&self, key: &CacheKey) -> Option<Arc<Vec<u8>>> {
        self.cache.get(key).cloned()
    }

    pub fn store(&mut self, revision: u64, key: CacheKey, body: Arc<Vec<u8>>) {
        if revision == self.revision {
            self.cache.insert(key, body);
        }
    }
}

pub struct SessionStore {
    dir: PathBuf,
    schema: CohortSchema,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

fn write_line(file: &mut File, entry: &LogEntry) -> ServiceResult<()> {
    let mut line = serde_json::to_vec(entry)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

impl SessionStore {
    /// Opens `dir` (created if missing) and replays every session log in it.
    pub fn open(dir: &Path, schema: CohortSchema) -> ServiceResult<Self> {
        std::fs::create_dir_all(dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let session = replay(&path, &schema)?;
            sessions.insert(session.input.id.clone(), Arc::new(Mutex::new(session)));
        }
        Ok(Self { dir: dir.to_path_buf(), schema, sessions: Mutex::new(sessions) })
    }

    pub fn schema(&self) -> &CohortSchema {
        &self.schema
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn create(&self, input: PatientInput) -> ServiceResult<Arc<Mutex<Session>>> {
        check_id(&input.id)?;
        let session = Session::new(input.clone(), &self.schema)?;
        let mut sessions = self.sessions.lock().expect("session map");
        if sessions.contains_key(&input.id) {
            return Err(ServiceError::Conflict(format!("patient `{}` already exists", input.id)));
        }
        let mut file = OpenOptions::new().write(true).create_new(true).open(self.log_path(&input.id))?;
        // the created entry carries any initial observations
        write_line(&mut file, &LogEntry::Created(session.input.clone()))?;
        let session = Arc::new(Mutex::new(session));
        sessions.insert(input.id, session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownPatient(id.to_string()))
    }

    /// Validates, persists and applies one day of observations.
    pub fn append(&self, id: &str, obs: ObservationInput) -> ServiceResult<()> {
        let session = self.get(id)?;
        let mut s = session.lock().expect("session");
        // validate on a copy so a failed write leaves the session untouched
        let mut record = s.record.clone();
        let mut last = s.last_day;
        apply_observation(&mut record, &mut last, &obs, &self.schema)?;
        let mut file = OpenOptions::new().append(true).open(self.log_path(id))?;
        write_line(&mut file, &LogEntry::Observation(obs.clone()))?;
        s.apply(obs, &self.schema)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("session map").keys().cloned().collect();
        ids.sort();
        ids
    }
}

fn replay(path: &Path, schema: &CohortSchema) -> ServiceResult<Session> {
    let reader = BufReader::new(File::open(path)?);
    let mut session: Option<Session> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line)
            .map_err(|e| ServiceError::BadRequest(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match (entry, session.as_mut()) {
            (LogEntry::Created(input), None) => session = Some(Session::new(input, schema)?),
            (LogEntry::Observation(obs), Some(s)) => s.apply(obs, schema)?,
            _ => return Err(ServiceError::BadRequest(format!("{}:{}: unexpected log entry", path.display(), i + 1))),
        }
    }
    session.ok_or_else(|| ServiceError::BadRequest(format!("{} is empty", path.display())))
}
