//! Local HTTP API under `/api/v1`. Every error body is an [`ApiError`].

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use pipetwin_core::analytics::{delta, overlay, AnalyticsError};
use pipetwin_core::diff::{project, DiffOverlay};
use pipetwin_core::{diff, StructuralDiff};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acquisition::{AcquisitionError, ProjectHandle, Secret, DEFAULT_CI_FILE};
use crate::bus::is_hash;
use crate::orchestrator::{Twin, TwinError};
use crate::store::StoreError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { key } => ApiError::not_found("not_found", format!("{key} not found")),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", other.to_string()),
        }
    }
}

fn forge_error(e: &AcquisitionError) -> ApiError {
    let code = match e {
        AcquisitionError::AuthFailed { .. } => "forge_auth_failed",
        AcquisitionError::NotFound { .. } => "forge_not_found",
        AcquisitionError::RateLimited { .. } => "forge_rate_limited",
        _ => "forge_unreachable",
    };
    ApiError::new(StatusCode::BAD_GATEWAY, code, e.to_string())
}

impl From<TwinError> for ApiError {
    fn from(e: TwinError) -> Self {
        match e {
            TwinError::UnknownProject(p) => {
                ApiError::not_found("unknown_project", format!("project {p:?} is not registered"))
            }
            TwinError::Acquisition(AcquisitionError::InvalidHandle(m)) => ApiError::invalid(m),
            TwinError::Acquisition(a) => forge_error(&a),
            TwinError::Store(s) => s.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub twin: Arc<Twin>,
    /// Used for projects registered without their own token.
    pub default_token: Option<Secret>,
}

impl AppState {
    pub fn new(twin: Arc<Twin>) -> Self {
        AppState {
            twin,
            default_token: None,
        }
    }

    pub fn with_default_token(mut self, token: Option<String>) -> Self {
        self.default_token = token.map(Secret::new);
        self
    }
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/projects", post(register).get(list_projects))
        .route("/projects/{id}/sync", post(sync))
        .route("/projects/{id}/versions", get(versions))
        .route("/projects/{id}/versions/{hash}/bpmn", get(bpmn))
        .route("/projects/{id}/versions/{hash}/model", get(model))
        .route("/projects/{id}/versions/{hash}/metrics", get(metrics))
        .route("/projects/{id}/metrics/delta", get(metrics_delta))
        .route("/projects/{id}/diff", get(diff_versions))
        .route("/projects/{id}/runs", get(runs))
        .route("/projects/{id}/runs/{run_id}/overlay", get(run_overlay));
    Router::new()
        .nest("/api/v1", v1)
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .layer(middleware::map_response(ensure_error_shape))
        .with_state(state)
}

/// Rewrites framework-generated error responses into the ApiError shape.
async fn ensure_error_shape(resp: Response) -> Response {
    let status = resp.status();
    if !(status.is_client_error() || status.is_server_error()) {
        return resp;
    }
    let is_json = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/json"));
    if is_json {
        return resp;
    }
    let body = to_bytes(resp.into_body(), 64 * 1024).await.unwrap_or_default();
    let text = String::from_utf8_lossy(&body).trim().to_string();
    let code = match status {
        StatusCode::METHOD_NOT_ALLOWED => "method_not_allowed",
        StatusCode::NOT_FOUND => "not_found",
        StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
        s if s.is_client_error() => "invalid_request",
        _ => "internal",
    };
    let message = if text.is_empty() {
        status.canonical_reason().unwrap_or("error").to_string()
    } else {
        text
    };
    ApiError::new(status, code, message).into_response()
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "build": { "name": "pipetwin", "version": env!("CARGO_PKG_VERSION") },
        "twin": s.twin.status(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    base_url: String,
    project_id: Value,
    ci_file_path: Option<String>,
    #[serde(rename = "ref")]
    git_ref: Option<String>,
    token: Option<String>,
}

async fn register(State(s): State<AppState>, body: Result<Json<RegisterBody>, JsonRejection>) -> ApiResult<Response> {
    let Json(b) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()))?;
    let id = match &b.project_id {
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_u64() => n.to_string(),
        other => {
            return Err(ApiError::invalid(format!(
                "project_id must be a string or an id, got {other}"
            )))
        }
    };
    let mut handle = ProjectHandle::new(&b.base_url, id)
        .map_err(|e| ApiError::invalid(e.to_string()))?
        .with_ci_file(b.ci_file_path.unwrap_or_else(|| DEFAULT_CI_FILE.into()));
    if let Some(r) = b.git_ref {
        handle = handle.with_ref(r);
    }
    handle.token = b.token.map(Secret::new).or_else(|| s.default_token.clone());
    let h = s.twin.register(handle)?;
    Ok((StatusCode::CREATED, Json(h)).into_response())
}

async fn list_projects(State(s): State<AppState>) -> ApiResult<Json<Vec<ProjectHandle>>> {
    Ok(Json(s.twin.store().projects()?))
}

fn known_project(s: &AppState, id: &str) -> ApiResult<()> {
    if s.twin.is_registered(id) || s.twin.store().project(id).is_ok() {
        Ok(())
    } else {
        Err(ApiError::not_found(
            "unknown_project",
            format!("project {id:?} is not registered"),
        ))
    }
}

fn check_hash(h: &str) -> ApiResult<()> {
    if is_hash(h) {
        Ok(())
    } else {
        Err(ApiError::invalid(format!(
            "{h:?} is not a full 64-character lowercase hex hash"
        )))
    }
}

/// 404 when nobody has the version, 409 when another project does.
fn known_version(s: &AppState, id: &str, hash: &str) -> ApiResult<()> {
    check_hash(hash)?;
    let owners = s.twin.store().projects_with_model(hash);
    if owners.iter().any(|o| o == id) {
        Ok(())
    } else if !owners.is_empty() {
        Err(ApiError::new(
            StatusCode::CONFLICT,
            "cross_project",
            format!("version {hash} belongs to another project"),
        ))
    } else {
        Err(ApiError::not_found(
            "unknown_version",
            format!("version {hash} is unknown"),
        ))
    }
}

fn path_error(e: PathRejection) -> ApiError {
    ApiError::invalid(e.body_text())
}

async fn sync(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    if !s.twin.is_registered(&id) {
        known_project(&s, &id)?;
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_registered",
            format!("project {id:?} must be registered again before it can sync"),
        ));
    }
    let report = s.twin.sync(&id).await?;
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

async fn versions(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    known_project(&s, &id)?;
    Ok(Json(
        serde_json::to_value(s.twin.store().versions(&id)?).expect("records serialize"),
    ))
}

async fn bpmn(State(s): State<AppState>, p: Result<Path<(String, String)>, PathRejection>) -> ApiResult<Response> {
    let Path((id, hash)) = p.map_err(path_error)?;
    known_project(&s, &id)?;
    known_version(&s, &id, &hash)?;
    let doc = s.twin.store().bpmn(&id, &hash).map_err(|e| match e {
        StoreError::NotFound { .. } => ApiError::not_found(
            "bpmn_unavailable",
            format!("no BPMN document could be generated for {hash}"),
        ),
        other => other.into(),
    })?;
    let mut resp = Body::from(doc.xml).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/xml"));
    Ok(resp)
}

async fn model(State(s): State<AppState>, p: Result<Path<(String, String)>, PathRejection>) -> ApiResult<Json<Value>> {
    let Path((id, hash)) = p.map_err(path_error)?;
    known_project(&s, &id)?;
    known_version(&s, &id, &hash)?;
    let doc = s.twin.store().model(&id, &hash)?.to_document();
    Ok(Json(serde_json::to_value(doc).expect("model serializes")))
}

async fn metrics(
    State(s): State<AppState>,
    p: Result<Path<(String, String)>, PathRejection>,
) -> ApiResult<Json<Value>> {
    let Path((id, hash)) = p.map_err(path_error)?;
    known_project(&s, &id)?;
    known_version(&s, &id, &hash)?;
    let m = s.twin.metrics(&id, &hash)?;
    Ok(Json(serde_json::to_value(m).expect("metrics serialize")))
}

#[derive(Debug, Deserialize)]
struct PairQuery {
    from: Option<String>,
    to: Option<String>,
}

fn pair(q: Result<Query<PairQuery>, QueryRejection>) -> ApiResult<(String, String)> {
    let Query(q) = q.map_err(|e| ApiError::invalid(e.body_text()))?;
    match (q.from, q.to) {
        (Some(f), Some(t)) => {
            check_hash(&f)?;
            check_hash(&t)?;
            Ok((f, t))
        }
        _ => Err(ApiError::invalid("both from and to are required")),
    }
}

async fn metrics_delta(
    State(s): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PairQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    known_project(&s, &id)?;
    let (from, to) = pair(q)?;
    known_version(&s, &id, &from)?;
    known_version(&s, &id, &to)?;
    let d = delta(&s.twin.metrics(&id, &from)?, &s.twin.metrics(&id, &to)?);
    Ok(Json(serde_json::to_value(d).expect("delta serializes")))
}

#[derive(Debug, Serialize)]
struct Overlays {
    from: DiffOverlay,
    to: DiffOverlay,
}

#[derive(Debug, Serialize)]
struct DiffResponse {
    #[serde(flatten)]
    diff: StructuralDiff,
    /// Absent when either version has no document.
    overlays: Option<Overlays>,
}

async fn diff_versions(
    State(s): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PairQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    known_project(&s, &id)?;
    let (from, to) = pair(q)?;
    known_version(&s, &id, &from)?;
    known_version(&s, &id, &to)?;
    let store = s.twin.store();
    let (a, b) = (store.model(&id, &from)?, store.model(&id, &to)?);
    let d = diff(&a, &b);
    let overlays = match (store.bpmn(&id, &from), store.bpmn(&id, &to)) {
        (Ok(da), Ok(db)) => {
            let (before, after) = project(&d, &da, &db)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
            Some(Overlays {
                from: before,
                to: after,
            })
        }
        _ => None,
    };
    Ok(Json(
        serde_json::to_value(DiffResponse { diff: d, overlays }).expect("diff serializes"),
    ))
}

#[derive(Debug, Deserialize)]
struct RunsQuery {
    hash: Option<String>,
}

async fn runs(
    State(s): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<RunsQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    known_project(&s, &id)?;
    let Query(q) = q.map_err(|e| ApiError::invalid(e.body_text()))?;
    let hash = q.hash;
    if let Some(h) = &hash {
        known_version(&s, &id, h)?;
    }
    let runs: Vec<_> = s
        .twin
        .store()
        .runs(&id)?
        .into_iter()
        .filter(|r| hash.as_ref().is_none_or(|h| &r.pipeline_yaml_hash == h))
        .collect();
    Ok(Json(serde_json::to_value(runs).expect("runs serialize")))
}

async fn run_overlay(
    State(s): State<AppState>,
    p: Result<Path<(String, u64)>, PathRejection>,
) -> ApiResult<Json<Value>> {
    let Path((id, run_id)) = p.map_err(path_error)?;
    known_project(&s, &id)?;
    let store = s.twin.store();
    let run = store.run(&id, run_id).map_err(|e| match e {
        StoreError::NotFound { .. } => ApiError::not_found("unknown_run", format!("run {run_id} is unknown")),
        other => other.into(),
    })?;
    let doc = store.bpmn(&id, &run.pipeline_yaml_hash).map_err(|e| match e {
        StoreError::NotFound { .. } => ApiError::not_found(
            "unknown_version",
            format!(
                "run {run_id} belongs to version {} which has no document",
                run.pipeline_yaml_hash
            ),
        ),
        other => other.into(),
    })?;
    let o = overlay(&run, &doc).map_err(|e: AnalyticsError| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "overlay_unavailable", e.to_string())
    })?;
    Ok(Json(serde_json::to_value(o).expect("overlay serializes")))
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
