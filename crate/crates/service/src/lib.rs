//! HTTP + WebSocket service hosting live sampling sessions.
//!
//! Each session runs its chain on a dedicated thread (see [`session`]); the
//! HTTP layer talks to it only through messages and reads frames from a
//! latest-value slot, so slow clients never stall a sampler.

pub mod api;
pub mod models;
pub mod runs;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ldam_core::dataset::{load_mnist, Split};
use ldam_core::{LabeledDataset, LdamError};

use crate::models::{JobTable, ModelStore};
use crate::session::{SessionError, SessionHandle, SessionModels, SessionSpec};

pub const RUNS_DIR_ENV: &str = "LDAM_RUNS_DIR";
pub const MODELS_DIR_ENV: &str = "LDAM_MODELS_DIR";
pub const BIND_ADDR_ENV: &str = "LDAM_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppConfig {
    pub runs_dir: PathBuf,
    pub models_dir: PathBuf,
    /// MNIST directory for training jobs and discriminator retraining; both
    /// are refused without it.
    pub data_dir: Option<PathBuf>,
}

impl AppConfig {
    /// Reads `LDAM_RUNS_DIR` (default `runs`), `LDAM_MODELS_DIR` (default
    /// `models`) and `LDAM_DATA_DIR`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var_os(k).map(PathBuf::from);
        Self {
            runs_dir: var(RUNS_DIR_ENV).unwrap_or_else(|| "runs".into()),
            models_dir: var(MODELS_DIR_ENV).unwrap_or_else(|| "models".into()),
            data_dir: var(ldam_core::dataset::DATA_DIR_ENV),
        }
    }
}

/// Resolves the listen address from `LDAM_BIND_ADDR`.
pub fn bind_addr_from_env() -> Result<SocketAddr, String> {
    let raw = std::env::var(BIND_ADDR_ENV).unwrap_or_else(|_| DEFAULT_BIND_ADDR.into());
    raw.parse()
        .map_err(|e| format!("{BIND_ADDR_ENV}={raw} is not a socket address: {e}"))
}

/// Error returned by every endpoint as `{"error": "..."}`.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Gone(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Gone(_) => StatusCode::GONE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<LdamError> for ApiError {
    fn from(e: LdamError) -> Self {
        match e {
            LdamError::InvalidArgument(_)
            | LdamError::InvalidNeuron(_)
            | LdamError::ArchMismatch(_)
            | LdamError::Shape { .. } => ApiError::BadRequest(e.to_string()),
            LdamError::MissingData(_) => ApiError::BadRequest(format!("{e} (see `ldam fetch`)")),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Rejected(m) => ApiError::Conflict(m),
            SessionError::Core(c) => c.into(),
            SessionError::Gone => ApiError::Gone(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.to_string() }));
        (self.status(), body).into_response()
    }
}

pub(crate) struct Inner {
    pub(crate) config: AppConfig,
    pub(crate) models: Arc<ModelStore>,
    pub(crate) jobs: JobTable,
    pub(crate) sessions: RwLock<HashMap<String, SessionHandle>>,
    /// Flips to true when the server starts shutting down, closing streams.
    pub(crate) closing: tokio::sync::watch::Sender<bool>,
    /// Training split, loaded on first use by a retraining session.
    pub(crate) real: Mutex<Option<Arc<LabeledDataset>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    pub fn new(config: AppConfig) -> Self {
        let models = Arc::new(ModelStore::new(config.models_dir.clone()));
        Self(Arc::new(Inner {
            config,
            models,
            jobs: Arc::new(Mutex::new(HashMap::new())),
            sessions: RwLock::new(HashMap::new()),
            closing: tokio::sync::watch::Sender::new(false),
            real: Mutex::new(None),
        }))
    }

    pub fn config(&self) -> &AppConfig {
        &self.0.config
    }

    pub fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.0
            .sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.0.sessions.read().expect("session table").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub(crate) fn resolve_models(&self, spec: &SessionSpec) -> Result<SessionModels, ApiError> {
        let model = self.0.models.get(&spec.model)?;
        let discriminator = spec
            .discriminator
            .as_deref()
            .map(|d| self.0.models.get(d))
            .transpose()?;
        let real = spec.adversarial.is_some().then(|| self.real_images()).transpose()?;
        Ok(SessionModels {
            model,
            discriminator,
            real,
        })
    }

    fn real_images(&self) -> Result<Arc<LabeledDataset>, ApiError> {
        let mut slot = self.0.real.lock().expect("real image cache");
        if let Some(d) = slot.as_ref() {
            return Ok(d.clone());
        }
        let dir = self.0.config.data_dir.as_deref().ok_or_else(|| {
            ApiError::BadRequest(format!(
                "discriminator retraining needs real images; set {}",
                ldam_core::dataset::DATA_DIR_ENV
            ))
        })?;
        let d = Arc::new(load_mnist(dir, Split::Train)?);
        *slot = Some(d.clone());
        Ok(d)
    }

    /// Creates a paused session and its run directory.
    pub fn create_session(&self, spec: SessionSpec) -> Result<SessionHandle, ApiError> {
        let models = self.resolve_models(&spec)?;
        let id = uuid::Uuid::new_v4().simple().to_string()[..12].to_string();
        let dir = self.0.config.runs_dir.join(&id);
        std::fs::create_dir_all(&dir)?;
        let handle = SessionHandle::spawn(id.clone(), spec, models, None, runs::persist_hook(dir.clone()))
            .inspect_err(|_| {
                let _ = std::fs::remove_dir_all(&dir);
            })?;
        self.0
            .sessions
            .write()
            .expect("session table")
            .insert(id, handle.clone());
        Ok(handle)
    }

    /// Re-attaches every persisted run by replaying its history. Sessions
    /// come back paused. Returns the ids restored; failures are logged.
    pub async fn restore_sessions(&self) -> Vec<String> {
        let dir = self.0.config.runs_dir.clone();
        let records = match tokio::task::spawn_blocking(move || runs::list_run_dirs(&dir)).await {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => {
                tracing::warn!("cannot read runs directory: {e}");
                return Vec::new();
            }
            Err(e) => {
                tracing::warn!("run listing panicked: {e}");
                return Vec::new();
            }
        };
        let mut restored = Vec::new();
        for (id, rec) in records {
            if self.0.sessions.read().expect("session table").contains_key(&id) {
                continue;
            }
            let models = match self.resolve_models(&rec.spec) {
                Ok(m) => m,
                Err(e) => {
                    tracing::warn!("not restoring run {id}: {e}");
                    continue;
                }
            };
            let run_dir = self.0.config.runs_dir.join(&id);
            let sid = id.clone();
            let spawned = tokio::task::spawn_blocking(move || {
                SessionHandle::spawn(
                    sid,
                    rec.spec,
                    models,
                    Some((rec.history, rec.tick)),
                    runs::persist_hook(run_dir),
                )
            })
            .await;
            match spawned {
                Ok(Ok(h)) => {
                    self.0.sessions.write().expect("session table").insert(id.clone(), h);
                    restored.push(id);
                }
                Ok(Err(e)) => tracing::warn!("not restoring run {id}: {e}"),
                Err(e) => tracing::warn!("restoring run {id} panicked: {e}"),
            }
        }
        restored
    }

    /// Stops every session worker; each persists its record on the way out.
    pub async fn shutdown_all(&self) {
        let handles: Vec<SessionHandle> = self
            .0
            .sessions
            .write()
            .expect("session table")
            .drain()
            .map(|(_, h)| h)
            .collect();
        for h in handles {
            if let Err(e) = h.shutdown().await {
                tracing::warn!("session {} did not stop cleanly: {e}", h.id);
            }
        }
    }
}

/// Serves the API on `listener` until `signal` resolves, then persists and
/// stops all sessions.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    signal: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = api::router(state.clone());
    let st = state.clone();
    let signal = async move {
        signal.await;
        // open streams would otherwise hold the graceful shutdown forever
        st.0.closing.send_replace(true);
    };
    axum::serve(listener, app).with_graceful_shutdown(signal).await?;
    state.shutdown_all().await;
    Ok(())
}
