//! HTTP facade over the interaction engine.
//!
//! Each session owns its copy of the sampling parameters; the segmentation
//! net is shared read-only. Requests for one session are serialised through a
//! FIFO lock and run on the blocking pool. Every accepted request is appended
//! to the session's journal so a restarted service can replay and resume.

pub mod api;
pub mod error;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Mutex as AsyncMutex;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use segloop_core::codec::{from_base64, image_from_png};
use segloop_core::data::load_dataset;
use segloop_core::engine::{read_journal, replay, JournalRecord};
use segloop_core::{AnnotatedCase, ImageSample, InteractionEvent, Model, Rle, Session, SessionConfig, SessionMode, SessionStatus};

use crate::api::{AcceptResponse, CreateSession, Health, SessionView};
use crate::error::ApiError;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_MAX_BODY_BYTES: usize = 4 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    /// Where session journals live; `None` keeps sessions in memory only.
    pub journal_dir: Option<PathBuf>,
    pub idle_timeout_secs: u64,
    pub max_body_bytes: usize,
    /// Dataset manifest whose cases can be opened by `case_id`.
    pub dataset: Option<PathBuf>,
    /// Static files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    /// Origins allowed by CORS; empty allows any.
    pub cors_origins: Vec<String>,
    /// Overrides of the model's default session settings, e.g. `{"seed": 3}`.
    /// Requests may override further.
    pub session: serde_json::Map<String, Value>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            journal_dir: None,
            idle_timeout_secs: DEFAULT_IDLE_TIMEOUT.as_secs(),
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            dataset: None,
            ui_dir: None,
            cors_origins: Vec::new(),
            session: serde_json::Map::new(),
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct ApiSession {
    session: Session,
    records: Vec<JournalRecord>,
    created_at: u64,
    last_active_at: u64,
    last_active: Instant,
    /// Expired by the idle timeout (resumable), as opposed to the iteration cap.
    idle_expired: bool,
}

impl ApiSession {
    fn view(&self) -> Result<SessionView, ApiError> {
        SessionView::of(&self.session, self.created_at, self.last_active_at)
    }

    fn touch(&mut self) {
        self.last_active = Instant::now();
        self.last_active_at = unix_now();
    }
}

type Handle = Arc<AsyncMutex<ApiSession>>;

pub struct AppState {
    model: Arc<Model>,
    checkpoint_sha256: String,
    defaults: SessionConfig,
    sessions: Mutex<HashMap<String, Handle>>,
    journal_dir: Option<PathBuf>,
    idle_timeout: Duration,
    cases: HashMap<String, AnnotatedCase>,
}

impl AppState {
    pub fn new(model: Arc<Model>, checkpoint_sha256: impl Into<String>, config: &ServiceConfig) -> anyhow::Result<Self> {
        let defaults = overlay(&SessionConfig::for_model(&model), &config.session)?;
        defaults.validate(&model)?;
        let cases = match &config.dataset {
            Some(path) => load_dataset(path)?.cases.into_iter().map(|c| (c.case_id().to_string(), c)).collect(),
            None => HashMap::new(),
        };
        if let Some(dir) = &config.journal_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            model,
            checkpoint_sha256: checkpoint_sha256.into(),
            defaults,
            sessions: Mutex::new(HashMap::new()),
            journal_dir: config.journal_dir.clone(),
            idle_timeout: Duration::from_secs(config.idle_timeout_secs),
            cases,
        })
    }

    pub fn checkpoint_sha256(&self) -> &str {
        &self.checkpoint_sha256
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn journal_path(&self, id: &str) -> Option<PathBuf> {
        self.journal_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn append(&self, id: &str, rec: &JournalRecord) -> Result<(), ApiError> {
        let Some(path) = self.journal_path(id) else { return Ok(()) };
        let io = |e: std::io::Error| ApiError::Internal(format!("journal {}: {e}", path.display()));
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        rec.write_line(&mut f).map_err(|e| ApiError::Internal(e.to_string()))?;
        f.flush().map_err(io)
    }

    /// Replays every journal in the journal directory that belongs to this checkpoint.
    pub fn resume_from_journals(&self) -> anyhow::Result<usize> {
        let Some(dir) = &self.journal_dir else { return Ok(0) };
        let mut resumed = 0;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match self.resume_one(&path) {
                Ok(true) => resumed += 1,
                Ok(false) => {}
                Err(e) => log::warn!("skipping journal {}: {e}", path.display()),
            }
        }
        Ok(resumed)
    }

    fn resume_one(&self, path: &Path) -> anyhow::Result<bool> {
        let records = read_journal(BufReader::new(fs::File::open(path)?))?;
        let Some(JournalRecord::Header { session_id, checkpoint_sha256, .. }) = records.first() else {
            anyhow::bail!("no header");
        };
        let session_id = session_id.clone();
        if checkpoint_sha256.as_deref() != Some(self.checkpoint_sha256.as_str()) {
            log::warn!("journal {} was written against another checkpoint; not resumed", path.display());
            return Ok(false);
        }
        let session = replay(Arc::clone(&self.model), &records)?;
        let now = unix_now();
        let entry = ApiSession {
            session,
            records,
            created_at: now,
            last_active_at: now,
            last_active: Instant::now(),
            idle_expired: false,
        };
        self.sessions.lock().expect("session table").insert(session_id,Arc::new(AsyncMutex::new(entry)));
        Ok(true)
    }

    fn handle(&self, id: &str) -> Result<Handle, ApiError> {
        self.sessions.lock().expect("session table").get(id).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn fresh_id(&self) -> String {
        let table = self.sessions.lock().expect("session table");
        loop {
            let id = format!("{:016x}", rand::random::<u64>());
            let on_disk = self.journal_path(&id).is_some_and(|p| p.exists());
            if !table.contains_key(&id) && !on_disk {
                return id;
            }
        }
    }

    /// Expires every active session idle for longer than the timeout.
    pub async fn expire_idle(&self) -> usize {
        let handles: Vec<Handle> = self.sessions.lock().expect("session table").values().cloned().collect();
        let mut n = 0;
        for h in handles {
            let mut s = h.lock().await;
            n += usize::from(expire_if_idle(&mut s, self.idle_timeout));
        }
        n
    }

    fn resolve_config(&self, overrides: Option<serde_json::Map<String, Value>>) -> Result<SessionConfig, ApiError> {
        match overrides {
            Some(o) => overlay(&self.defaults, &o),
            None => Ok(self.defaults.clone()),
        }
    }

    fn image_for(&self, req: &CreateSession) -> Result<ImageSample, ApiError> {
        let cfg = &self.model.config;
        match (&req.image_png, &req.case_id) {
            (Some(b64), None) => {
                let bytes = from_base64(b64)?;
                let image = image_from_png("upload", &bytes)?;
                if image.height() > cfg.image_height || image.width() > cfg.image_width {
                    return Err(ApiError::TooLarge(format!(
                        "image is {}×{}, the model takes {}×{}",
                        image.height(),
                        image.width(),
                        cfg.image_height,
                        cfg.image_width
                    )));
                }
                Ok(image)
            }
            (None, Some(id)) => self
                .cases
                .get(id)
                .map(|c| c.image().clone())
                .ok_or_else(|| ApiError::NotFound(format!("case {id}"))),
            _ => Err(ApiError::BadRequest("give exactly one of image_png and case_id".into())),
        }
    }
}

/// `base` with the named settings replaced.
pub fn overlay(base: &SessionConfig, overrides: &serde_json::Map<String, Value>) -> Result<SessionConfig, ApiError> {
    let Value::Object(mut fields) = serde_json::to_value(base)? else {
        return Err(ApiError::Internal("session settings are not an object".into()));
    };
    for (k, v) in overrides {
        if !fields.contains_key(k) {
            return Err(ApiError::BadRequest(format!("unknown session setting {k:?}")));
        }
        fields.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(Value::Object(fields))?)
}

fn expire_if_idle(s: &mut ApiSession, timeout: Duration) -> bool {
    if s.session.status() == SessionStatus::Active && s.last_active.elapsed() > timeout {
        s.session.expire();
        s.idle_expired = true;
        return true;
    }
    false
}

fn closed(s: &ApiSession) -> Option<ApiError> {
    match s.session.status() {
        SessionStatus::Active => None,
        status => Some(ApiError::Conflict {
            message: format!("session {} is {status:?}", s.session.id()),
            resume_hint: s.idle_expired.then(|| format!("POST /sessions/{}/resume replays its journal", s.session.id())),
        }),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn create(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = serde_json::from_slice(&body?)?;
    let image = state.image_for(&req)?;
    let config = state.resolve_config(req.config)?;
    let mode = req.mode.unwrap_or(SessionMode::Adaptive);
    let id = state.fresh_id();
    let st = Arc::clone(&state);
    let view = blocking(move || {
        let session = Session::create(id.clone(), Arc::clone(&st.model), image, config, mode)?;
        let header = JournalRecord::header(&session, Some(st.checkpoint_sha256.clone()));
        st.append(&id, &header)?;
        let now = unix_now();
        let entry = ApiSession {
            session,
            records: vec![header],
            created_at: now,
            last_active_at: now,
            last_active: Instant::now(),
            idle_expired: false,
        };
        let view = entry.view()?;
        st.sessions.lock().expect("session table").insert(id, Arc::new(AsyncMutex::new(entry)));
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn show(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let h = state.handle(&id)?;
    let mut s = h.lock().await;
    expire_if_idle(&mut s, state.idle_timeout);
    Ok(Json(s.view()?))
}

async fn event(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let ev: InteractionEvent = serde_json::from_slice(&body?)?;
    let h = state.handle(&id)?;
    // FIFO: tokio's mutex queues waiters in arrival order
    let mut s = h.lock_owned().await;
    expire_if_idle(&mut s, state.idle_timeout);
    if let Some(e) = closed(&s) {
        return Err(e);
    }
    let st = Arc::clone(&state);
    blocking(move || {
        s.session.apply_selection(ev.clone())?;
        let rec = JournalRecord::Event { event: ev };
        st.append(&id, &rec)?;
        s.records.push(rec);
        s.touch();
        s.view()
    })
    .await
    .map(Json)
}

async fn accept(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<AcceptResponse>, ApiError> {
    let h = state.handle(&id)?;
    let mut s = h.lock().await;
    expire_if_idle(&mut s, state.idle_timeout);
    if s.session.status() == SessionStatus::Expired {
        return Err(closed(&s).expect("expired"));
    }
    let first = s.session.status() == SessionStatus::Active;
    let mask = s.session.accept()?;
    if first {
        state.append(&id, &JournalRecord::Accept)?;
        s.records.push(JournalRecord::Accept);
        s.touch();
    }
    Ok(Json(AcceptResponse {
        session_id: id,
        status: s.session.status(),
        iteration: s.session.iteration(),
        remaining: s.session.remaining(),
        mask: Rle::encode(&mask),
    }))
}

async fn resume(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let h = state.handle(&id)?;
    let mut s = h.lock_owned().await;
    if !s.idle_expired {
        return Err(ApiError::Conflict { message: format!("session {id} was not expired by the idle timeout"), resume_hint: None });
    }
    let model = Arc::clone(&state.model);
    blocking(move || {
        s.session = replay(model, &s.records)?;
        s.idle_expired = false;
        s.touch();
        s.view()
    })
    .await
    .map(Json)
}

async fn remove(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    let removed = state.sessions.lock().expect("session table").remove(&id);
    if removed.is_none() {
        return Err(ApiError::NotFound(id));
    }
    if let Some(p) = state.journal_path(&id) {
        if let Err(e) = fs::remove_file(&p) {
            log::warn!("could not delete journal {}: {e}", p.display());
        }
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), checkpoint_sha256: state.checkpoint_sha256.clone(), sessions: state.session_count() })
}

pub fn router(state: Arc<AppState>, config: &ServiceConfig) -> anyhow::Result<Router> {
    let cors = if config.cors_origins.is_empty() {
        CorsLayer::permissive()
    } else {
        let origins = config.cors_origins.iter().map(|o| o.parse()).collect::<Result<Vec<_>, _>>()?;
        CorsLayer::new()
            .allow_origin(origins)
            .allow_methods(tower_http::cors::Any)
            .allow_headers(tower_http::cors::Any)
    };
    let mut app = Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show).delete(remove))
        .route("/sessions/{id}/events", post(event))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/resume", post(resume));
    if let Some(dir) = &config.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    Ok(app.layer(DefaultBodyLimit::max(config.max_body_bytes)).layer(cors).with_state(state))
}

/// Loads the checkpoint, resumes journaled sessions and serves until Ctrl-C.
pub async fn serve(checkpoint: &Path, config: ServiceConfig) -> anyhow::Result<()> {
    let (model, sha) = segloop_core::checkpoint::load(checkpoint)?;
    let state = Arc::new(AppState::new(Arc::new(model), sha, &config)?);
    let resumed = state.resume_from_journals()?;
    if resumed > 0 {
        log::info!("resumed {resumed} sessions from journals");
    }
    let sweeper = Arc::clone(&state);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(30));
        loop {
            tick.tick().await;
            let n = sweeper.expire_idle().await;
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    let app = router(Arc::clone(&state), &config)?;
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("listening on {} (checkpoint {})", listener.local_addr()?, state.checkpoint_sha256());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
