//! HTTP+JSON annotation service.
//!
//! Routes:
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/sessions` | JSON `{scene_id}` or `{scene, targets?}`, or a raw PLY body (`?targets=1,2`) | `SessionStats` |
//! | POST | `/sessions/{id}/clicks` | `{clicks: [{x, y, z, region}]}` | `MaskResponse` |
//! | POST | `/sessions/{id}/undo` | | `MaskResponse` |
//! | GET | `/sessions/{id}/mask` | | `MaskResponse` |
//! | GET | `/sessions/{id}/export` | `?format=ply\|json\|jsonl` | file |
//! | DELETE | `/sessions/{id}` | | 204 |
//! | GET | `/healthz` | | `{status, model_loaded, sessions}` |
//! | GET | `/model` | | `ModelIdentity` |
//!
//! Errors are `{error, message}` with a matching status code.

pub mod error;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clickseg::scene::{PointCloud, SceneFormat};
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

pub use error::ServiceError;
pub use session::{
    ClickInput, CreateRequest, ExportFile, ExportFormat, JsonExport, LoadedModel, MaskResponse, SceneSource,
    ServiceConfig, Session, SessionManager, SessionStats, Timings,
};

pub type AppState = Arc<SessionManager>;

#[derive(Debug, Default, Deserialize)]
struct CreateBody {
    scene_id: Option<String>,
    scene: Option<PointCloud>,
    targets: Option<Vec<u32>>,
}

#[derive(Debug, Default, Deserialize)]
struct CreateQuery {
    /// Comma-separated object ids for raw uploads.
    targets: Option<String>,
    /// `ply` (default) or `json` for raw uploads.
    format: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ClicksBody {
    #[serde(default)]
    clicks: Vec<ClickInput>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<ExportFormat>,
}

/// Runs blocking session work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

fn parse_create(headers: &HeaderMap, query: CreateQuery, body: Bytes) -> Result<CreateRequest, ServiceError> {
    if is_json(headers) {
        let body: CreateBody =
            serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))?;
        let source = match (body.scene_id, body.scene) {
            (Some(id), None) => SceneSource::Id(id),
            (None, Some(cloud)) => SceneSource::Cloud(cloud),
            _ => return Err(ServiceError::BadRequest("send exactly one of scene_id or scene".into())),
        };
        return Ok(CreateRequest {
            source,
            targets: body.targets,
        });
    }
    let format = match query.format.as_deref() {
        None | Some("ply") => SceneFormat::Ply,
        Some("json") => SceneFormat::Json,
        Some(other) => return Err(ServiceError::BadRequest(format!("unknown upload format {other:?}"))),
    };
    let targets = query
        .targets
        .map(|t| {
            t.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| ServiceError::BadRequest(format!("invalid target id {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok(CreateRequest {
        source: SceneSource::Bytes {
            bytes: body.to_vec(),
            format,
        },
        targets,
    })
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<CreateQuery>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionStats>), ServiceError> {
    let request = parse_create(&headers, query, body)?;
    let stats = blocking(move || state.create(request)).await?;
    Ok((StatusCode::CREATED, Json(stats)))
}

async fn add_clicks(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MaskResponse>, ServiceError> {
    let body: ClicksBody =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid click payload: {e}")))?;
    Ok(Json(blocking(move || state.add_clicks(&id, &body.clicks)).await?))
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<MaskResponse>, ServiceError> {
    Ok(Json(blocking(move || state.undo(&id)).await?))
}

async fn mask(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<MaskResponse>, ServiceError> {
    Ok(Json(blocking(move || state.mask(&id)).await?))
}

async fn export(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<ExportQuery>,
) -> Result<Response, ServiceError> {
    let format = query.format.unwrap_or(ExportFormat::Json);
    let file = blocking(move || state.export(&id, format)).await?;
    let disposition = format!("attachment; filename=\"{}\"", file.file_name);
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(file.content_type)),
            (
                header::CONTENT_DISPOSITION,
                HeaderValue::from_str(&disposition).map_err(|e| ServiceError::Internal(e.to_string()))?,
            ),
        ],
        file.bytes,
    )
        .into_response())
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ServiceError> {
    state.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": state.model().is_some(),
        "sessions": state.len(),
    }))
}

async fn model_info(State(state): State<AppState>) -> Result<Response, ServiceError> {
    let loaded = state.model().ok_or(ServiceError::NotReady)?;
    Ok(Json(&loaded.identity).into_response())
}

fn cors(config: &ServiceConfig) -> Result<CorsLayer, ServiceError> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match &config.cors_origin {
        None => layer.allow_origin(Any),
        Some(origin) => layer.allow_origin(
            HeaderValue::from_str(origin).map_err(|_| ServiceError::BadRequest(format!("invalid origin {origin:?}")))?,
        ),
    })
}

pub fn router(state: AppState) -> Result<Router, ServiceError> {
    let cors = cors(&state.config)?;
    let limit = state.config.max_body_bytes;
    Ok(Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/clicks", post(add_clicks))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/mask", get(mask))
        .route("/sessions/{id}/export", get(export))
        .route("/healthz", get(healthz))
        .route("/model", get(model_info))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let app = router(state).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await
}
