//! JSON API for stepwise parsing sessions with expert lexicon submission.
//!
//! Each session wraps one [`Episode`]. Mutations on a session (parse,
//! lexicon) hold its lock for their full duration, so they apply in arrival
//! order, and the session file is rewritten before the response is sent.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dkap_core::harness::{Episode, EpisodeConfig, EpisodeState, HarnessError, Peek};
use dkap_core::lexicon::{EntryField, LexiconError};
use dkap_core::{EpisodeReport, IdentityMode, Instance, LexiconEntry, ParseRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SessionStatus {
    Active,
    Finished,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub id: String,
    pub created_at_ms: u128,
    pub status: SessionStatus,
    pub state: EpisodeState,
}

pub struct Session {
    pub id: String,
    pub created_at_ms: u128,
    pub status: SessionStatus,
    pub episode: Episode,
}

impl Session {
    fn to_file(&self) -> SessionFile {
        SessionFile {
            id: self.id.clone(),
            created_at_ms: self.created_at_ms,
            status: self.status,
            state: self.episode.state().clone(),
        }
    }

    fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            status: self.status,
            t: self.episode.t(),
            total: self.episode.state().stream.len(),
            kb_size: self.episode.kb().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: SessionStatus,
    /// Next 1-based step.
    pub t: usize,
    pub total: usize,
    pub kb_size: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub stream: Option<Vec<Instance>>,
    #[serde(default)]
    pub config: Option<EpisodeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitLexicon {
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResult {
    pub added: Vec<LexiconEntry>,
    /// Submitted entries already present in the knowledge base.
    pub duplicates: usize,
    pub kb_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbView {
    pub identity_mode: IdentityMode,
    pub size: usize,
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub status: SessionStatus,
    pub report: EpisodeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("session is {0:?}")]
    Conflict(SessionStatus),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Validation(LexiconError),
    #[error("backend failure: {0}")]
    Backend(HarnessError),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, index, field) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, None, None),
            ApiError::Conflict(_) => (StatusCode::CONFLICT, None, None),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, None, None),
            ApiError::Validation(LexiconError::EmptyField { index, field }) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                Some(*index),
                Some(match field {
                    EntryField::Key => "key".to_string(),
                    EntryField::Value => "value".to_string(),
                }),
            ),
            ApiError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, None, None),
            ApiError::Backend(_) => (StatusCode::BAD_GATEWAY, None, None),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, None, None),
        };
        (status, Json(ErrorBody { error: self.to_string(), index, field })).into_response()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Stream used when a create request carries none.
    pub default_stream: Option<Vec<Instance>>,
    pub default_config: EpisodeConfig,
    /// Session files live here; existing ones are resumed at startup.
    pub data_dir: Option<PathBuf>,
    pub assets_dir: Option<PathBuf>,
}

type SessionHandle = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn session_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn persist(dir: Option<&Path>, session: &Session) -> Result<(), ApiError> {
    let Some(dir) = dir else { return Ok(()) };
    let path = session_path(dir, &session.id);
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec(&session.to_file()).map_err(|e| ApiError::Internal(e.to_string()))?;
    std::fs::write(&tmp, body)
        .and_then(|_| std::fs::rename(&tmp, &path))
        .map_err(|e| ApiError::Internal(format!("persisting session {}: {e}", session.id)))
}

impl AppState {
    /// Builds the state, resuming any session files found in `data_dir`.
    pub fn new(config: ServerConfig) -> Result<Self, std::io::Error> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.data_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_none_or(|e| e != "json") {
                    continue;
                }
                match load_session(&path) {
                    Ok(s) => {
                        sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
                    }
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable session file"),
                }
            }
        }
        Ok(Self { inner: Arc::new(Inner { config, sessions: Mutex::new(sessions) }) })
    }

    async fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.inner.sessions.lock().await.get(id).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn data_dir(&self) -> Option<PathBuf> {
        self.inner.config.data_dir.clone()
    }
}

fn load_session(path: &Path) -> Result<Session, Box<dyn std::error::Error>> {
    let file: SessionFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let episode = Episode::from_state(file.state)?;
    Ok(Session { id: file.id, created_at_ms: file.created_at_ms, status: file.status, episode })
}

/// Runs `f` on the locked session in the blocking pool.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, Option<&Path>) -> Result<T, ApiError> + Send + 'static,
{
    let handle = state.session(id).await?;
    let mut guard = handle.lock_owned().await;
    let dir = state.data_dir();
    tokio::task::spawn_blocking(move || f(&mut guard, dir.as_deref()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(
    State(state): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let stream = req
        .stream
        .or_else(|| state.inner.config.default_stream.clone())
        .ok_or_else(|| ApiError::BadRequest("no stream given and no default stream configured".into()))?;
    let config = req.config.unwrap_or_else(|| state.inner.config.default_config.clone());
    let dir = state.data_dir();
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let episode = Episode::new(stream, config).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let session = Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            created_at_ms: now_ms(),
            status: SessionStatus::Active,
            episode,
        };
        persist(dir.as_deref(), &session)?;
        Ok(session)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let summary = session.summary();
    state.inner.sessions.lock().await.insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionSummary>, ApiError> {
    let handle = state.session(&id).await?;
    let summary = handle.lock().await.summary();
    Ok(Json(summary))
}

async fn next(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Peek>, ApiError> {
    with_session(&state, &id, |s, _| {
        if s.status != SessionStatus::Active {
            return Err(ApiError::Conflict(s.status));
        }
        s.episode.peek().map_err(ApiError::Backend)
    })
    .await
    .map(Json)
}

async fn parse(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ParseRecord>, ApiError> {
    with_session(&state, &id, |s, dir| {
        if s.status != SessionStatus::Active {
            return Err(ApiError::Conflict(s.status));
        }
        // A failed step leaves the episode untouched and the session active,
        // so the client may retry.
        let record = s.episode.step().map_err(ApiError::Backend)?.clone();
        if s.episode.is_finished() {
            s.status = SessionStatus::Finished;
        }
        persist(dir, s)?;
        Ok(record)
    })
    .await
    .map(Json)
}

async fn submit_lexicon(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<SubmitLexicon>,
) -> Result<Json<SubmitResult>, ApiError> {
    with_session(&state, &id, move |s, dir| {
        if s.status == SessionStatus::Aborted {
            return Err(ApiError::Conflict(s.status));
        }
        let submitted = body.entries.len();
        let added = s.episode.submit_expert(body.entries).map_err(|e| match e {
            HarnessError::Lexicon(e) => ApiError::Validation(e),
            other => ApiError::Internal(other.to_string()),
        })?;
        persist(dir, s)?;
        Ok(SubmitResult { duplicates: submitted - added.len(), added, kb_size: s.episode.kb().len() })
    })
    .await
    .map(Json)
}

async fn kb(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<KbView>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.lock().await;
    let kb = s.episode.kb();
    Ok(Json(KbView { identity_mode: kb.identity_mode(), size: kb.len(), entries: kb.entries().to_vec() }))
}

async fn report(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ReportView>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.lock().await;
    Ok(Json(ReportView { status: s.status, report: s.episode.report() }))
}

async fn records(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Vec<ParseRecord>>, ApiError> {
    let handle = state.session(&id).await?;
    let records = handle.lock().await.episode.records().to_vec();
    Ok(Json(records))
}

pub fn router(state: AppState) -> Router {
    let assets = state.inner.config.assets_dir.clone();
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/parse", post(parse))
        .route("/sessions/{id}/lexicon", post(submit_lexicon))
        .route("/sessions/{id}/kb", get(kb))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/records", get(records))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
    .layer(tower_http::trace::TraceLayer::new_for_http())
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let app = router(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
