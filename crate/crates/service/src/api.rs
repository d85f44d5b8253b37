//! HTTP API over a loaded model bundle and the patient session store.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/model` | bundle metadata |
//! | GET, POST | `/patients` | list ids, create a session |
//! | GET | `/patients/{id}` | session state |
//! | POST | `/patients/{id}/observations` | append one day |
//! | GET | `/patients/{id}/prediction` | `?day=&pathway=&a=&S=&seed=` |
//! | GET, POST | `/patients/{id}/whatif` | prediction with hypothetical days, never persisted |
//!
//! GET `whatif` takes `obs_day` (default: the day after the last one) and one
//! `biomarker=value` pair per hypothetical value; POST takes
//! `{"observations": [...]}`. The prediction day defaults to the last
//! (hypothetical) observed day.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use dynrisk_core::cohort::PatientRecord;
use dynrisk_core::model::PredictOptions;
use dynrisk_core::prediction::{Pathway, DEFAULT_SIMULATIONS, DEFAULT_WINDOW};
use serde::Deserialize;
use serde_json::json;

use crate::bundle::ModelBundle;
use crate::error::{ServiceError, ServiceResult};
use crate::patient::{apply_observation, ObservationInput, PatientInput};
use crate::session::{CacheKey, Session, SessionStore};

#[derive(Clone)]
pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub store: Arc<SessionStore>,
}

impl AppState {
    pub fn new(bundle: ModelBundle, store: SessionStore) -> Self {
        Self { bundle: Arc::new(bundle), store: Arc::new(store) }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", get(model))
        .route("/patients", get(list).post(create))
        .route("/patients/{id}", get(patient))
        .route("/patients/{id}/observations", axum::routing::post(observe))
        .route("/patients/{id}/prediction", get(prediction))
        .route("/patients/{id}/whatif", get(whatif_query).post(whatif_body))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn status_of(err: &ServiceError) -> StatusCode {
    use dynrisk_core::Error as E;
    match err {
        ServiceError::BadRequest(_) | ServiceError::Json(_) => StatusCode::BAD_REQUEST,
        ServiceError::UnknownPatient(_) => StatusCode::NOT_FOUND,
        ServiceError::Conflict(_) => StatusCode::CONFLICT,
        ServiceError::Core(e) if e.is_numerical() => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Core(e) => match e {
            E::InvalidConfig(_)
            | E::NonFiniteInput
            | E::SchemaMismatch(_)
            | E::UnknownBiomarker { .. }
            | E::DimensionMismatch(_) => StatusCode::BAD_REQUEST,
            E::Precondition(_) | E::EmptyHistory(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        },
        ServiceError::HashMismatch { .. } | ServiceError::BundleVersion(_) | ServiceError::Io(_) | ServiceError::Internal(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (status_of(&self), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))
}

fn session_doc(s: &Session) -> serde_json::Value {
    json!({ "id": s.input.id, "last_day": s.last_day, "revision": s.revision, "patient": s.input })
}

async fn model(State(st): State<AppState>) -> Response {
    let b = &st.bundle;
    let pathways: Vec<Pathway> = [
        b.model.prospective.is_some().then_some(Pathway::Prospective),
        b.model.retrospective.is_some().then_some(Pathway::Retrospective),
    ]
    .into_iter()
    .flatten()
    .collect();
    Json(json!({
        "version": b.version,
        "metadata": b.metadata,
        "config": b.model.config,
        "horizon": b.model.horizon,
        "pathways": pathways,
    }))
    .into_response()
}

async fn list(State(st): State<AppState>) -> Response {
    Json(json!({ "patients": st.store.ids() })).into_response()
}

async fn create(State(st): State<AppState>, body: Bytes) -> ServiceResult<Response> {
    let input: PatientInput = parse_body(&body)?;
    let session = st.store.create(input)?;
    let doc = session_doc(&session.lock().expect("session"));
    Ok((StatusCode::CREATED, Json(doc)).into_response())
}

async fn patient(State(st): State<AppState>, Path(id): Path<String>) -> ServiceResult<Response> {
    let session = st.store.get(&id)?;
    let doc = session_doc(&session.lock().expect("session"));
    Ok(Json(doc).into_response())
}

async fn observe(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ServiceResult<Response> {
    let obs: ObservationInput = parse_body(&body)?;
    st.store.append(&id, obs)?;
    let doc = session_doc(&st.store.get(&id)?.lock().expect("session"));
    Ok(Json(doc).into_response())
}

/// Prediction parameters shared by `prediction` and `whatif`.
#[derive(Clone, Debug, Default)]
struct Params {
    day: Option<u32>,
    pathway: Option<Pathway>,
    a: Option<usize>,
    simulations: Option<usize>,
    seed: Option<u64>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> ServiceResult<T> {
    v.parse().map_err(|_| ServiceError::BadRequest(format!("query parameter `{key}` has invalid value `{v}`")))
}

impl Params {
    /// Takes the known keys and returns the remaining pairs.
    fn parse(pairs: Vec<(String, String)>) -> ServiceResult<(Self, Vec<(String, String)>)> {
        let mut p = Params::default();
        let mut rest = Vec::new();
        for (k, v) in pairs {
            match k.as_str() {
                "day" => p.day = Some(parse_num(&k, &v)?),
                "pathway" => p.pathway = Some(v.parse().map_err(ServiceError::BadRequest)?),
                "a" => p.a = Some(parse_num(&k, &v)?),
                "S" => p.simulations = Some(parse_num(&k, &v)?),
                "seed" => p.seed = Some(parse_num(&k, &v)?),
                _ => rest.push((k, v)),
            }
        }
        Ok((p, rest))
    }

    fn options(&self) -> PredictOptions {
        PredictOptions {
            pathway: self.pathway.unwrap_or(Pathway::Retrospective),
            simulations: self.simulations.unwrap_or(DEFAULT_SIMULATIONS),
            window: self.a.unwrap_or(DEFAULT_WINDOW),
            seed: self.seed.unwrap_or(1),
            fan: true,
        }
    }
}

fn reject_extra(rest: &[(String, String)]) -> ServiceResult<()> {
    match rest.first() {
        Some((k, _)) => Err(ServiceError::BadRequest(format!("unknown query parameter `{k}`"))),
        None => Ok(()),
    }
}

async fn compute(bundle: Arc<ModelBundle>, record: PatientRecord, day: u32, options: PredictOptions) -> ServiceResult<Vec<u8>> {
    tokio::task::spawn_blocking(move || -> ServiceResult<Vec<u8>> {
        let response = bundle.predict(&record, day, &options)?;
        Ok(serde_json::to_vec(&response)?)
    })
    .await
    .map_err(|e| ServiceError::Internal(format!("prediction task failed: {e}")))?
}

async fn prediction(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(pairs): Query<Vec<(String, String)>>,
) -> ServiceResult<Response> {
    let (params, rest) = Params::parse(pairs)?;
    reject_extra(&rest)?;
    let options = params.options();
    let session = st.store.get(&id)?;
    let (record, revision, key) = {
        let s = session.lock().expect("session");
        let key = CacheKey {
            day: params.day.unwrap_or(s.last_day),
            pathway: options.pathway,
            a: options.window,
            simulations: options.simulations,
            seed: options.seed,
        };
        if let Some(body) = s.cached(&key) {
            return Ok(json_bytes(StatusCode::OK, body.as_ref().clone()));
        }
        (s.record.clone(), s.revision, key)
    };
    let body = Arc::new(compute(st.bundle.clone(), record, key.day, options).await?);
    session.lock().expect("session").store(revision, key, body.clone());
    Ok(json_bytes(StatusCode::OK, body.as_ref().clone()))
}

async fn whatif(st: AppState, id: String, params: Params, hypothetical: Vec<ObservationInput>) -> ServiceResult<Response> {
    let session = st.store.get(&id)?;
    let (mut record, mut last_day) = {
        let s = session.lock().expect("session");
        (s.record.clone(), s.last_day)
    };
    for obs in &hypothetical {
        apply_observation(&mut record, &mut last_day, obs, st.store.schema())?;
    }
    let day = params.day.unwrap_or(last_day);
    let body = compute(st.bundle.clone(), record, day, params.options()).await?;
    Ok(json_bytes(StatusCode::OK, body))
}

async fn whatif_query(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(pairs): Query<Vec<(String, String)>>,
) -> ServiceResult<Response> {
    let (params, rest) = Params::parse(pairs)?;
    let mut obs_day = None;
    let mut values = std::collections::BTreeMap::new();
    for (k, v) in rest {
        if k == "obs_day" {
            obs_day = Some(parse_num::<u32>(&k, &v)?);
        } else {
            let x: f64 = parse_num(&k, &v)?;
            if values.insert(k.clone(), x).is_some() {
                return Err(ServiceError::BadRequest(format!("biomarker `{k}` given twice")));
            }
        }
    }
    let hypothetical = if values.is_empty() {
        if obs_day.is_some() {
            return Err(ServiceError::BadRequest("obs_day given without biomarker values".into()));
        }
        Vec::new()
    } else {
        let day = match obs_day {
            Some(d) => d,
            None => st.store.get(&id)?.lock().expect("session").last_day + 1,
        };
        vec![ObservationInput { day, values }]
    };
    whatif(st, id, params, hypothetical).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatifBody {
    observations: Vec<ObservationInput>,
}

async fn whatif_body(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(pairs): Query<Vec<(String, String)>>,
    body: Bytes,
) -> ServiceResult<Response> {
    let (params, rest) = Params::parse(pairs)?;
    reject_extra(&rest)?;
    let WhatifBody { observations } = parse_body(&body)?;
    whatif(st, id, params, observations).await
}
