//! Route table and handlers. JSON bodies are the domain types serialized
//! field for field; errors are `{"error": "..."}` with a matching status.

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::models::{spawn_training, ModelInfo, TrainJob, TrainRequest};
use crate::runs::{self, RunDetail, RunSummary, SnapshotInfo};
use crate::session::{
    ControlAction, FrameSlot, HistoryEvent, ParamPatch, PatchAck, SessionSpec, SessionStatus,
};
use crate::{ApiError, AppState, VERSION};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models))
        .route("/models/train", post(train_model))
        .route("/models/train/{job}", get(train_job))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(close_session))
        .route("/sessions/{id}/params", axum::routing::patch(patch_params))
        .route("/sessions/{id}/control", post(control))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/frame", get(latest_frame))
        .route("/sessions/{id}/snapshot", post(snapshot))
        .route("/sessions/{id}/stream", get(stream))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .with_state(state)
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: VERSION.into(),
    })
}

async fn list_models(State(s): State<AppState>) -> ApiResult<Vec<ModelInfo>> {
    let store = s.0.models.clone();
    let list = tokio::task::spawn_blocking(move || store.list())
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(list))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job: String,
}

async fn train_model(
    State(s): State<AppState>,
    Json(req): Json<TrainRequest>,
) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    let job = spawn_training(
        s.0.models.clone(),
        s.0.config.data_dir.clone(),
        s.0.jobs.clone(),
        req,
    )?;
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { job })))
}

async fn train_job(State(s): State<AppState>, Path(job): Path<String>) -> ApiResult<TrainJob> {
    s.0.jobs
        .lock()
        .expect("job table")
        .get(&job)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no training job `{job}`")))
}

async fn create_session(
    State(s): State<AppState>,
    Json(spec): Json<SessionSpec>,
) -> Result<(StatusCode, Json<SessionStatus>), ApiError> {
    let st = s.clone();
    let handle = tokio::task::spawn_blocking(move || st.create_session(spec))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(handle.status().await?)))
}

async fn list_sessions(State(s): State<AppState>) -> ApiResult<Vec<SessionStatus>> {
    let mut out = Vec::new();
    for id in s.session_ids() {
        // a session closed concurrently is simply left out
        if let Ok(h) = s.session(&id) {
            if let Ok(st) = h.status().await {
                out.push(st);
            }
        }
    }
    Ok(Json(out))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionStatus> {
    Ok(Json(s.session(&id)?.status().await?))
}

/// Stops the worker and detaches the session; its run directory stays.
async fn close_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let h = s.session(&id)?;
    h.shutdown().await?;
    s.0.sessions.write().expect("session table").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn patch_params(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(p): Json<ParamPatch>,
) -> ApiResult<PatchAck> {
    Ok(Json(s.session(&id)?.patch(p).await?))
}

async fn control(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(a): Json<ControlAction>,
) -> ApiResult<SessionStatus> {
    Ok(Json(s.session(&id)?.control(a).await?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub spec: SessionSpec,
    pub history: Vec<HistoryEvent>,
    pub tick: u64,
}

async fn history(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<HistoryView> {
    let (spec, history, tick) = s.session(&id)?.history().await?;
    Ok(Json(HistoryView { spec, history, tick }))
}

fn frame_response(bytes: &[u8]) -> Response {
    (
        [(header::CONTENT_TYPE, "application/octet-stream")],
        Bytes::copy_from_slice(bytes),
    )
        .into_response()
}

/// Latest published frame, or 204 before the first step.
async fn latest_frame(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match s.session(&id)?.latest_frame() {
        Some(f) => frame_response(&f),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn snapshot(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SnapshotInfo> {
    let (status, frame) = s.session(&id)?.snapshot().await?;
    let dir = s.0.config.runs_dir.join(&id);
    let info = tokio::task::spawn_blocking(move || runs::write_snapshot(&dir, &status, &frame))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(format!("snapshot not written: {e}")))?;
    Ok(Json(info))
}

async fn stream(
    State(s): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let frames = s.session(&id)?.subscribe();
    let closing = s.0.closing.subscribe();
    Ok(ws.on_upgrade(move |socket| pump(socket, frames, closing)))
}

/// Forwards the latest frame to the client whenever it changes. Frames
/// published while a send is in flight collapse into the newest one.
async fn pump(mut socket: WebSocket, mut frames: watch::Receiver<FrameSlot>, mut closing: watch::Receiver<bool>) {
    let first = frames.borrow_and_update().clone();
    if let Some(f) = first {
        if socket.send(Message::Binary(Bytes::copy_from_slice(&f))).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            changed = frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let latest = frames.borrow_and_update().clone();
                if let Some(f) = latest {
                    if socket.send(Message::Binary(Bytes::copy_from_slice(&f))).await.is_err() {
                        return;
                    }
                }
            }
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
            _ = async { closing.wait_for(|c| *c).await.map(|_| ()) } => break,
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Vec<RunSummary>> {
    let dir = s.0.config.runs_dir.clone();
    let records = tokio::task::spawn_blocking(move || runs::list_run_dirs(&dir))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let live = s.session_ids();
    Ok(Json(
        records
            .into_iter()
            .map(|(id, rec)| RunSummary {
                live: live.contains(&id),
                model: rec.spec.model,
                tick: rec.tick,
                edits: rec.history.len(),
                id,
            })
            .collect(),
    ))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<RunDetail> {
    crate::models::check_id(&id)?;
    let dir = s.0.config.runs_dir.join(&id);
    let live = s.session_ids().contains(&id);
    tokio::task::spawn_blocking(move || {
        let record = runs::read_record(&dir).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ApiError::NotFound(format!("no run `{id}`")),
            _ => ApiError::Internal(e.to_string()),
        })?;
        let snapshots = runs::snapshot_names(&dir)?;
        Ok(Json(RunDetail {
            record,
            snapshots,
            live,
        }))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}
