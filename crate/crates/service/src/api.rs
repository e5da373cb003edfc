use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use skipforge_core::imageio::decode_png;
use skipforge_core::pipeline::{EditMode, EditRequest, Engine};

use crate::error::ServiceError;
use crate::jobs::{CheckpointRegistry, JobQueue, SweepSubmission};
use crate::schema;
use crate::store::{new_run_id, Job, JobKind, RunStore};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<RunStore>,
    pub registry: Arc<CheckpointRegistry>,
    pub queue: JobQueue,
}

pub fn routes(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/schema", get(|| async { Json(schema::document()) }))
        .route("/checkpoints", get(list_checkpoints))
        .route("/images", post(upload_image))
        .route("/runs", post(submit_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/request", get(get_request))
        .route("/runs/{id}/images/{name}", get(get_image))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/runs/{id}/results.csv", get(get_results))
        .route("/sweeps", post(submit_sweep))
        .with_state(state)
}

/// Deserializes with the failing field's path in the error.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ServiceError::Invalid { field, message: e.into_inner().to_string() }
    })
}

#[derive(Debug, Deserialize)]
struct CheckpointQuery {
    checkpoint: Option<String>,
}

async fn list_checkpoints(State(s): State<AppState>) -> Json<serde_json::Value> {
    let registry = s.registry.clone();
    let list = tokio::task::spawn_blocking(move || registry.list()).await.unwrap_or_default();
    Json(json!({ "checkpoints": list }))
}

async fn upload_image(State(s): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    decode_png(&body)
        .map_err(|e| ServiceError::Invalid { field: "body".into(), message: format!("not a PNG image: {e}") })?;
    let id = s.store.put_image(&body)?;
    Ok((StatusCode::CREATED, Json(json!({ "image_id": id }))).into_response())
}

/// Loads the checkpoint off the async runtime and runs `check` against it.
async fn with_engine<T: Send + 'static>(
    s: &AppState,
    name: Option<String>,
    check: impl FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
) -> Result<(String, String, T), ServiceError> {
    let registry = s.registry.clone();
    tokio::task::spawn_blocking(move || {
        let name = registry.resolve(name.as_deref())?;
        let ck = registry.get(&name)?;
        let engine = Engine::new(&ck)?;
        let out = check(&engine)?;
        Ok((name, engine.checkpoint_hash.clone(), out))
    })
    .await
    .map_err(|e| ServiceError::Config(format!("validation task failed: {e}")))?
}

fn check_image_source(store: &RunStore, req: &EditRequest) -> Result<(), ServiceError> {
    if let Some(id) = &req.source.image {
        store.image_path(id).map_err(|_| ServiceError::Invalid {
            field: "source.image".into(),
            message: format!("unknown image {id}"),
        })?;
    }
    Ok(())
}

async fn submit_run(
    State(s): State<AppState>,
    Query(q): Query<CheckpointQuery>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let mut req: EditRequest = parse_body(&body)?;
    req.run_id.clear();
    req.validate_shape()?;
    check_image_source(&s.store, &req)?;
    let checked = req.clone();
    let (checkpoint, hash, ()) = with_engine(&s, q.checkpoint, move |e| Ok(checked.validate(e)?)).await?;
    let run_id = new_run_id(&req.canonical_json()?);
    req.run_id = run_id.clone();
    enqueue(&s, Job::new(run_id.clone(), JobKind::Edit, checkpoint, hash), &req.canonical_json()?)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id }))).into_response())
}

async fn submit_sweep(
    State(s): State<AppState>,
    Query(q): Query<CheckpointQuery>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let mut sub: SweepSubmission = parse_body(&body)?;
    sub.base.run_id.clear();
    if !matches!(sub.base.mode, EditMode::EditGenerated | EditMode::StyleTransfer) || sub.base.source.seed.is_none() {
        return Err(ServiceError::Invalid {
            field: "base.mode".into(),
            message: "sweeps start from a seeded generated source".into(),
        });
    }
    let checked = sub.clone();
    let (checkpoint, hash, ()) = with_engine(&s, q.checkpoint, move |e| {
        checked.grid.validate(e.model.config(), e.train_steps())?;
        checked.base.sampler.validate(e.train_steps())?;
        Ok(())
    })
    .await?;
    let canonical = skipforge_core::container::canonical_json(&sub)?;
    let run_id = new_run_id(&canonical);
    enqueue(&s, Job::new(run_id.clone(), JobKind::Sweep, checkpoint, hash), &canonical)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id }))).into_response())
}

fn enqueue(s: &AppState, job: Job, request_json: &str) -> Result<(), ServiceError> {
    s.store.create(&job, request_json)?;
    tracing::info!(run_id = %job.run_id, kind = ?job.kind, "run queued");
    s.queue.enqueue(job.run_id)
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    50
}

async fn list_runs(State(s): State<AppState>, Query(p): Query<Page>) -> Result<Json<serde_json::Value>, ServiceError> {
    let (total, runs) = s.store.list(p.offset, p.limit.min(500))?;
    Ok(Json(json!({ "total": total, "offset": p.offset, "runs": runs })))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ServiceError> {
    Ok(Json(s.store.get(&id)?))
}

async fn get_request(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let text = s.store.request_json(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn get_image(
    State(s): State<AppState>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ServiceError> {
    let file = if name.ends_with(".png") { name } else { format!("{name}.png") };
    let bytes = s.store.read_output(&id, &file)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_metrics(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let bytes = s.store.read_output(&id, "metrics.json")?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn get_results(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let bytes = s.store.read_output(&id, "results.csv")?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], bytes).into_response())
}
