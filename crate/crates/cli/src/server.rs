//! HTTP + JSON service. Every body carries `schema_version` and the
//! `config_hash` of the parameters or specification it was computed from.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ionlds_core::model::StateSpaceParams;
use ionlds_core::synth::{self, GeneratorSpec, MissingSpec, ProtocolTemplate, RateRule};
use ionlds_core::{hash_json, SCHEMA_VERSION};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AppError, ErrorClass};
use crate::forecasting::{self, ForecastRequest, WhatIfRequest};
use crate::jobs::{FitRequest, JobManager, JobStatus};
use crate::store::Store;

#[derive(Clone)]
pub struct AppState {
    pub store: Store,
    pub jobs: Arc<JobManager>,
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match self.class {
            ErrorClass::Invalid => StatusCode::BAD_REQUEST,
            ErrorClass::NotFound => StatusCode::NOT_FOUND,
            ErrorClass::Conflict => StatusCode::CONFLICT,
            ErrorClass::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "config_hash": Value::Null,
            "error": { "kind": self.kind, "message": self.message },
        });
        (status, axum::Json(body)).into_response()
    }
}

/// Wraps `payload` (an object) with the version and hash fields.
fn respond(status: StatusCode, config_hash: &str, payload: impl Serialize) -> Response {
    let mut body = match serde_json::to_value(payload) {
        Ok(Value::Object(map)) => map,
        Ok(other) => {
            let mut m = serde_json::Map::new();
            m.insert("data".into(), other);
            m
        }
        Err(e) => return AppError::internal(e.to_string()).into_response(),
    };
    body.insert("schema_version".into(), json!(SCHEMA_VERSION));
    body.insert("config_hash".into(), json!(config_hash));
    (status, axum::Json(Value::Object(body))).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, AppError> {
    if body.is_empty() {
        return Err(AppError::invalid("schema", "request body is empty"));
    }
    let value: Value =
        serde_json::from_slice(body).map_err(|e| AppError::invalid("schema", format!("malformed JSON: {e}")))?;
    if let Some(v) = value.get("schema_version") {
        if v != &json!(SCHEMA_VERSION) {
            return Err(AppError::invalid("schema", format!("unsupported schema_version {v}")));
        }
    }
    let value = match value {
        Value::Object(mut m) => {
            m.remove("schema_version");
            Value::Object(m)
        }
        other => other,
    };
    serde_json::from_value(value).map_err(|e| AppError::invalid("schema", e.to_string()))
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/simulate", post(simulate))
        .route("/fits", post(start_fit))
        .route("/fits/{id}", get(get_fit).delete(cancel_fit))
        .route("/models", get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/forecast", post(model_forecast))
        .route("/models/{id}/whatif", post(model_whatif))
        .with_state(state)
        .layer(tower_http::cors::CorsLayer::permissive());
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn health(State(s): State<AppState>) -> Response {
    match s.store.check() {
        Ok(()) => respond(
            StatusCode::OK,
            &hash_json(&s.store.root()),
            json!({ "status": "ok", "workers": s.jobs.workers() }),
        ),
        Err(e) => e.into_response(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateRequest {
    seed: u64,
    /// Single trajectory: protocol template and rate rule.
    #[serde(default)]
    template: Option<ProtocolTemplate>,
    #[serde(default)]
    rate_rule: Option<RateRule>,
    /// Parameters to sample from; defaults to the generator's base model.
    #[serde(default)]
    params: Option<StateSpaceParams>,
    #[serde(default)]
    missing: Option<MissingSpec>,
    /// Cohort mode: number of patients drawn from `spec`.
    #[serde(default)]
    n_patients: Option<usize>,
    #[serde(default)]
    spec: Option<GeneratorSpec>,
}

fn do_simulate(req: SimulateRequest) -> Result<Response, AppError> {
    let spec = req.spec.clone().unwrap_or_else(GeneratorSpec::stationary);
    if let Some(n) = req.n_patients {
        if req.template.is_some() || req.params.is_some() {
            return Err(AppError::invalid(
                "schema",
                "n_patients cannot be combined with template or params",
            ));
        }
        let members = synth::make_cohort(n, req.seed, &spec)?;
        let patients: Vec<Value> = members
            .iter()
            .map(|m| json!({ "id": m.id, "protocol": m.protocol, "series": m.series, "truth": m.truth }))
            .collect();
        let cohort_id = ionlds_core::cohort::synthetic_cohort_id(req.seed, n, &spec);
        return Ok(respond(
            StatusCode::OK,
            &hash_json(&spec),
            json!({ "cohort_id": cohort_id, "seed": req.seed, "patients": patients }),
        ));
    }
    let template = req
        .template
        .ok_or_else(|| AppError::invalid("schema", "simulate needs a template or n_patients"))?;
    let rule = req.rate_rule.unwrap_or(spec.rate_rule);
    let params = match req.params {
        Some(p) => p,
        None => spec.base_params()?,
    };
    if template.dt != params.dt {
        return Err(AppError::invalid(
            "dimension",
            format!("template dt {} differs from model dt {}", template.dt, params.dt),
        ));
    }
    let protocol = synth::make_protocol(&template, &rule)?;
    let series = synth::sample_trajectory(&params, &protocol, req.seed, &req.missing.unwrap_or_default())?;
    Ok(respond(
        StatusCode::OK,
        &params.config_hash(),
        json!({ "seed": req.seed, "protocol": protocol, "series": series }),
    ))
}

async fn simulate(body: Bytes) -> Response {
    let req: SimulateRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match tokio::task::spawn_blocking(move || do_simulate(req)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => AppError::internal(e.to_string()).into_response(),
    }
}

async fn start_fit(State(s): State<AppState>, body: Bytes) -> Response {
    let req: FitRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match s.jobs.submit(req) {
        Ok(job) => {
            let hash = job.config_hash.clone();
            respond(StatusCode::ACCEPTED, &hash, json!({ "job": job }))
        }
        Err(e) => e.into_response(),
    }
}

fn job_body(s: &AppState, id: &str) -> Result<(String, Value), AppError> {
    let job = s.jobs.get(id)?;
    let model = match (&job.status, &job.model_id) {
        (JobStatus::Succeeded, Some(mid)) => Some(s.store.model(mid)?),
        _ => None,
    };
    let hash = model
        .as_ref()
        .map_or(job.config_hash.clone(), |m| m.config_hash.clone());
    Ok((
        hash,
        json!({
            "job": job,
            "status": job.status,
            "progress": job.progress,
            "model": model,
        }),
    ))
}

async fn get_fit(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    match job_body(&s, &id) {
        Ok((hash, body)) => respond(StatusCode::OK, &hash, body),
        Err(e) => e.into_response(),
    }
}

async fn cancel_fit(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    match s.jobs.cancel(&id) {
        Ok(job) => {
            let hash = job.config_hash.clone();
            respond(StatusCode::OK, &hash, json!({ "job": job, "status": job.status }))
        }
        Err(e) => e.into_response(),
    }
}

async fn list_models(State(s): State<AppState>) -> Response {
    match s.store.models() {
        Ok(models) => {
            let hashes: Vec<&str> = models.iter().map(|m| m.config_hash.as_str()).collect();
            let summaries: Vec<Value> = models.iter().map(|m| m.summary()).collect();
            respond(StatusCode::OK, &hash_json(&hashes), json!({ "models": summaries }))
        }
        Err(e) => e.into_response(),
    }
}

async fn get_model(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    match s.store.model(&id) {
        Ok(m) => {
            let hash = m.config_hash.clone();
            respond(StatusCode::OK, &hash, json!({ "model": m }))
        }
        Err(e) => e.into_response(),
    }
}

async fn model_forecast(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let run = move || -> Result<Response, AppError> {
        let record = s.store.model(&id)?;
        let req: ForecastRequest = parse(&body)?;
        let out = forecasting::forecast(&record, &req)?;
        Ok(respond(StatusCode::OK, &record.config_hash, out))
    };
    match tokio::task::spawn_blocking(run).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => AppError::internal(e.to_string()).into_response(),
    }
}

async fn model_whatif(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let run = move || -> Result<Response, AppError> {
        let record = s.store.model(&id)?;
        let req: WhatIfRequest = parse(&body)?;
        let out = forecasting::what_if(&record, &req)?;
        Ok(respond(StatusCode::OK, &record.config_hash, out))
    };
    match tokio::task::spawn_blocking(run).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => AppError::internal(e.to_string()).into_response(),
    }
}

/// Binds and serves until interrupted.
pub async fn serve(
    store: Store,
    host: &str,
    port: u16,
    workers: usize,
    ui_dir: Option<PathBuf>,
) -> Result<(), AppError> {
    let jobs = JobManager::new(store.clone(), workers);
    let resumed = jobs.resume()?;
    if resumed > 0 {
        log::info!("re-queued {resumed} unfinished fit jobs");
    }
    let app = router(
        AppState {
            store: store.clone(),
            jobs,
        },
        ui_dir,
    );
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| AppError::invalid("io", format!("cannot bind {host}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(AppError::from)?;
    log::info!("serving on http://{addr} with store {}", store.root().display());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::internal(e.to_string()))
}
