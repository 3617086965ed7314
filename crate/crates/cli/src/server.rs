//! HTTP API over a session store, plus a job queue for audits.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lamp_core::probe::predict;
use lamp_core::{run_audit, AuditConfig, AuditSession, LampError, SessionStore, TaskTemplate, WeightVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::services::ServeDir;

use crate::backend::Backend;

const INDEX_HTML: &str = include_str!("../assets/index.html");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    errors: Vec<FieldError>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(Vec<FieldError>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, errors) = match self {
            ApiError::NotFound(what) => (StatusCode::NOT_FOUND, format!("{what} not found"), Vec::new()),
            ApiError::BadRequest(errors) => (StatusCode::BAD_REQUEST, "invalid request".to_string(), errors),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, msg, Vec::new()),
        };
        (status, Json(ErrorBody { error, errors })).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Body of `POST /api/audit`.
#[derive(Debug, Deserialize)]
struct AuditRequest {
    text: String,
    #[serde(default)]
    task: Option<String>,
    #[serde(default)]
    config: Option<AuditConfig>,
}

#[derive(Clone)]
pub struct AppState {
    store: SessionStore,
    backend: Backend,
    ui_dir: Option<PathBuf>,
    jobs: Arc<Mutex<HashMap<String, JobStatus>>>,
    next_job: Arc<AtomicU64>,
    /// Held by the running audit job, so jobs share one endpoint pool in turn.
    pool: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(store: SessionStore, backend: Backend, ui_dir: Option<PathBuf>) -> Self {
        Self {
            store,
            backend,
            ui_dir,
            jobs: Arc::default(),
            next_job: Arc::new(AtomicU64::new(1)),
            pool: Arc::default(),
        }
    }

    fn set_job(&self, status: JobStatus) {
        self.jobs.lock().expect("job table").insert(status.id.clone(), status);
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/whatif", post(whatif))
        .route("/api/audit", post(submit_audit))
        .route("/api/jobs/{id}", get(get_job));
    let app = match &state.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    };
    app.with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))
}

async fn load(state: &AppState, id: String) -> ApiResult<AuditSession> {
    let store = state.store.clone();
    let what = format!("session `{id}`");
    match blocking(move || store.load(&id)).await? {
        Ok(session) => Ok(session),
        Err(LampError::Parameter(_)) => Err(ApiError::NotFound(what)),
        Err(LampError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::NotFound(what)),
        Err(e) => Err(ApiError::Internal(e.to_string())),
    }
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Response> {
    let store = state.store.clone();
    let list = blocking(move || store.list()).await?.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(list).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(load(&state, id).await?).into_response())
}

/// Validates a what-if body against a session of dimension `d`.
pub fn parse_weights(body: &[u8], d: usize) -> std::result::Result<Vec<f64>, Vec<FieldError>> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| vec![FieldError::new("body", format!("invalid JSON: {e}"))])?;
    let Some(raw) = value.get("weights") else {
        return Err(vec![FieldError::new("weights", "required")]);
    };
    let Some(items) = raw.as_array() else {
        return Err(vec![FieldError::new("weights", "must be an array of numbers")]);
    };
    let mut errors = Vec::new();
    if items.len() != d {
        errors.push(FieldError::new("weights", format!("expected {d} values, got {}", items.len())));
    }
    let mut weights = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item.as_f64() {
            Some(w) if w >= 0.0 => weights.push(w),
            Some(_) => errors.push(FieldError::new(format!("weights[{i}]"), "must be non-negative")),
            None => errors.push(FieldError::new(format!("weights[{i}]"), "must be a number")),
        }
    }
    if errors.is_empty() {
        Ok(weights)
    } else {
        Err(errors)
    }
}

async fn whatif(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let session = load(&state, id).await?;
    let weights = parse_weights(&body, session.dim()).map_err(ApiError::BadRequest)?;
    let w = WeightVector::new(weights)
        .map_err(|e| ApiError::BadRequest(vec![FieldError::new("weights", e.to_string())]))?;
    let prediction = predict(&session.surrogate, &w).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(prediction).into_response())
}

fn parse_audit_request(
    body: &[u8],
) -> std::result::Result<(String, Option<TaskTemplate>, AuditConfig), Vec<FieldError>> {
    let req: AuditRequest = serde_json::from_slice(body).map_err(|e| vec![FieldError::new("body", e.to_string())])?;
    let mut errors = Vec::new();
    let text = req.text.trim().to_string();
    if text.is_empty() {
        errors.push(FieldError::new("text", "must not be empty"));
    }
    let task = match req.task.as_deref() {
        None => None,
        Some(id) => {
            let t = TaskTemplate::builtin(id);
            if t.is_none() {
                errors.push(FieldError::new("task", format!("unknown task `{id}`")));
            }
            t
        }
    };
    let config = req.config.unwrap_or_default();
    if let Err(e) = config.validate() {
        errors.push(FieldError::new("config", e.to_string()));
    }
    if errors.is_empty() {
        Ok((text, task, config))
    } else {
        Err(errors)
    }
}

async fn submit_audit(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let (text, task, config) = parse_audit_request(&body).map_err(ApiError::BadRequest)?;
    let task = task.unwrap_or_else(|| state.backend.task.clone());
    let id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    let queued = JobStatus { id: id.clone(), state: JobState::Queued, session_id: None, stage: None, error: None };
    state.set_job(queued.clone());
    let worker = state.clone();
    let accepted = queued.clone();
    tokio::spawn(async move {
        let _pool = worker.pool.lock().await;
        worker.set_job(JobStatus { state: JobState::Running, ..queued.clone() });
        let finished = match worker.backend.gateway_for(task) {
            Err(e) => JobStatus { state: JobState::Failed, error: Some(e.to_string()), ..queued },
            Ok(gateway) => match run_audit(&config, &text, &gateway).await {
                Ok(session) => {
                    let store = worker.store.clone();
                    let session_id = session.id.clone();
                    match blocking(move || store.save(&session)).await {
                        Ok(Ok(_)) => JobStatus { state: JobState::Succeeded, session_id: Some(session_id), ..queued },
                        Ok(Err(e)) => JobStatus { state: JobState::Failed, error: Some(e.to_string()), ..queued },
                        Err(_) => {
                            JobStatus { state: JobState::Failed, error: Some("save task panicked".into()), ..queued }
                        }
                    }
                }
                Err(failure) => {
                    let store = worker.store.clone();
                    let draft = failure.draft.clone();
                    let _ = blocking(move || store.save_draft(&draft)).await;
                    JobStatus {
                        state: JobState::Failed,
                        stage: Some(failure.stage.to_string()),
                        error: Some(failure.error.to_string()),
                        ..queued
                    }
                }
            },
        };
        worker.set_job(finished);
    });
    Ok((StatusCode::ACCEPTED, Json(accepted)).into_response())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let status = state.jobs.lock().expect("job table").get(&id).cloned();
    status.map(|s| Json(s).into_response()).ok_or_else(|| ApiError::NotFound(format!("job `{id}`")))
}
