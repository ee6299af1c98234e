//! HTTP front end for sessions.
//!
//! Each session is owned by one worker thread that applies commands from a
//! bounded queue, so instructions run strictly in submission order. Readers
//! never touch the session itself: the worker publishes every journal event
//! into a shared log plus a broadcast channel, and refreshes a snapshot of
//! the report and artifacts after each command.
//!
//! Routes:
//!
//! - `POST /v1/sessions` -> `{"session_id"}`
//! - `POST /v1/sessions/{id}/dataset?role=train|test` (raw CSV body) -> summary
//! - `POST /v1/sessions/{id}/instructions` `{"text"}` -> 202 `{"seq"}`
//! - `GET /v1/sessions/{id}/events?from=N` -> server-sent events
//! - `GET /v1/sessions/{id}/report`
//! - `GET /v1/sessions/{id}/artifacts/{name}`

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use tandem_core::agents::AgentConfig;
use tandem_core::llm::{ChatBackend, LlmError};
use tandem_core::session::{self, DatasetRole, JournalEvent, Session, SessionError, SessionOptions, SystemClock};
use tandem_core::ErrorCode;

pub const DEFAULT_QUEUE_BOUND: usize = 16;
const BROADCAST_BUFFER: usize = 1024;

pub type BackendFactory = Arc<dyn Fn() -> Result<Box<dyn ChatBackend>, LlmError> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub max_sessions: usize,
    pub max_upload_bytes: usize,
    pub queue_bound: usize,
    pub agent: AgentConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            max_sessions: 64,
            max_upload_bytes: session::DEFAULT_MAX_UPLOAD_BYTES,
            queue_bound: DEFAULT_QUEUE_BOUND,
            agent: AgentConfig::default(),
        }
    }
}

/// API error body: `{"code", "message"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        let status = match code {
            "E_SESSION_NOT_FOUND" | "E_NOT_FOUND" => StatusCode::NOT_FOUND,
            "E_QUEUE_FULL" | "E_CAPACITY" => StatusCode::TOO_MANY_REQUESTS,
            "E_IO" | "E_INTERNAL" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self { status, code: code.to_string(), message: message.into() }
    }
}

impl<E: ErrorCode + std::fmt::Display> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

enum Command {
    Attach { role: DatasetRole, csv: Vec<u8>, reply: oneshot::Sender<Result<Value, ApiError>> },
    Instruction(String),
}

#[derive(Default)]
struct Snapshot {
    report: Value,
    artifacts: BTreeMap<String, Vec<u8>>,
}

struct Handle {
    queue: SyncSender<Command>,
    events: Arc<RwLock<Vec<JournalEvent>>>,
    live: broadcast::Sender<JournalEvent>,
    snapshot: Arc<RwLock<Snapshot>>,
    submitted: AtomicU64,
}

struct Inner {
    config: ServiceConfig,
    backend: BackendFactory,
    sessions: Mutex<HashMap<String, Arc<Handle>>>,
}

#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn refresh(session: &Session, snapshot: &RwLock<Snapshot>) {
    let artifacts = session.artifact_names().into_iter().filter_map(|n| session.artifact(&n).ok().map(|b| (n, b.to_vec()))).collect();
    let mut report = session.report();
    report["session_id"] = json!(session.id);
    *snapshot.write().expect("snapshot lock") = Snapshot { report, artifacts };
}

impl Service {
    /// Builds the service and reopens every session found in `data_dir`.
    pub fn new(config: ServiceConfig, backend: BackendFactory) -> Result<Self, ApiError> {
        std::fs::create_dir_all(&config.data_dir).map_err(|e| ApiError::new("E_IO", format!("{}: {e}", config.data_dir.display())))?;
        let service = Service { inner: Arc::new(Inner { config, backend, sessions: Mutex::new(HashMap::new()) }) };
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&service.inner.config.data_dir)
            .map_err(|e| ApiError::new("E_IO", e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(session::JOURNAL_FILE).exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            match Session::open(&dir, Box::new(SystemClock)) {
                Ok(s) => {
                    service.spawn(s)?;
                }
                Err(e) => tracing::warn!("skipping session {}: {e}", dir.display()),
            }
        }
        Ok(service)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.sessions.lock().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn handle(&self, id: &str) -> Result<Arc<Handle>, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new("E_SESSION_NOT_FOUND", format!("session {id} not found")))
    }

    fn spawn(&self, mut session: Session) -> Result<String, ApiError> {
        let backend = (self.inner.backend)()?;
        let id = session.id.clone();
        let events = Arc::new(RwLock::new(session.events().to_vec()));
        let (live, _) = broadcast::channel(BROADCAST_BUFFER);
        let snapshot = Arc::new(RwLock::new(Snapshot::default()));
        refresh(&session, &snapshot);
        {
            let events = events.clone();
            let live = live.clone();
            session.add_listener(Box::new(move |e| {
                events.write().expect("events lock").push(e.clone());
                let _ = live.send(e.clone());
            }));
        }
        let (queue, rx) = mpsc::sync_channel::<Command>(self.inner.config.queue_bound);
        let submitted = AtomicU64::new(session.state.transcript.len() as u64);
        let worker_snapshot = snapshot.clone();
        std::thread::Builder::new()
            .name(format!("session-{}", &id[..id.len().min(8)]))
            .spawn(move || {
                while let Ok(cmd) = rx.recv() {
                    match cmd {
                        Command::Attach { role, csv, reply } => {
                            let _ = reply.send(session.attach(role, &csv).map_err(ApiError::from));
                        }
                        Command::Instruction(text) => {
                            if let Err(e) = session.submit(&text, backend.as_ref()) {
                                tracing::error!("session {}: {e}", session.id);
                            }
                        }
                    }
                    refresh(&session, &worker_snapshot);
                }
            })
            .map_err(|e| ApiError::new("E_INTERNAL", e.to_string()))?;
        let handle = Arc::new(Handle { queue, events, live, snapshot, submitted });
        self.inner.sessions.lock().expect("sessions lock").insert(id.clone(), handle);
        Ok(id)
    }

    pub fn create_session(&self, seed: u64) -> Result<String, ApiError> {
        if self.inner.sessions.lock().expect("sessions lock").len() >= self.inner.config.max_sessions {
            return Err(ApiError::new("E_CAPACITY", format!("session limit of {} reached", self.inner.config.max_sessions)));
        }
        let id = session::random_session_id();
        let options = SessionOptions {
            seed,
            agent: self.inner.config.agent.clone(),
            max_upload_bytes: self.inner.config.max_upload_bytes,
            target: None,
        };
        let s = Session::create(Some(&self.inner.config.data_dir.join(&id)), &id, options, Box::new(SystemClock))?;
        self.spawn(s)
    }

    pub async fn attach(&self, id: &str, role: DatasetRole, csv: Vec<u8>) -> Result<Value, ApiError> {
        let h = self.handle(id)?;
        if csv.len() > self.inner.config.max_upload_bytes {
            return Err(SessionError::TooLarge { size: csv.len(), limit: self.inner.config.max_upload_bytes }.into());
        }
        let (reply, rx) = oneshot::channel();
        match h.queue.try_send(Command::Attach { role, csv, reply }) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => return Err(ApiError::new("E_QUEUE_FULL", "session queue is full")),
            Err(TrySendError::Disconnected(_)) => return Err(ApiError::new("E_INTERNAL", "session worker stopped")),
        }
        rx.await.map_err(|_| ApiError::new("E_INTERNAL", "session worker stopped"))?
    }

    /// Enqueues an instruction; returns its 1-based ordinal in the session.
    pub fn submit(&self, id: &str, text: String) -> Result<u64, ApiError> {
        let h = self.handle(id)?;
        match h.queue.try_send(Command::Instruction(text)) {
            Ok(()) => Ok(h.submitted.fetch_add(1, Ordering::SeqCst) + 1),
            Err(TrySendError::Full(_)) => Err(ApiError::new("E_QUEUE_FULL", format!("at most {} queued commands", self.inner.config.queue_bound))),
            Err(TrySendError::Disconnected(_)) => Err(ApiError::new("E_INTERNAL", "session worker stopped")),
        }
    }

    pub fn events_from(&self, id: &str, from: u64) -> Result<Vec<JournalEvent>, ApiError> {
        let h = self.handle(id)?;
        let events = h.events.read().expect("events lock");
        let start = (from.max(1) - 1).min(events.len() as u64) as usize;
        Ok(events[start..].to_vec())
    }

    /// Journal replay from `from`, then the live tail; ends when the
    /// consumer falls too far behind (it can resume with a later `from`).
    pub fn event_stream(&self, id: &str, from: u64) -> Result<impl Stream<Item = JournalEvent> + Send + 'static, ApiError> {
        let h = self.handle(id)?;
        let rx = h.live.subscribe();
        let backlog = {
            let events = h.events.read().expect("events lock");
            let start = (from.max(1) - 1).min(events.len() as u64) as usize;
            events[start..].to_vec()
        };
        let last = backlog.last().map_or(from.max(1) - 1, |e| e.seq);
        let tail = stream::unfold((rx, last), |(mut rx, last)| async move {
            loop {
                match rx.recv().await {
                    Ok(e) if e.seq <= last => continue,
                    Ok(e) => {
                        let seq = e.seq;
                        return Some((e, (rx, seq)));
                    }
                    Err(_) => return None,
                }
            }
        });
        Ok(stream::iter(backlog).chain(tail))
    }

    pub fn report(&self, id: &str) -> Result<Value, ApiError> {
        Ok(self.handle(id)?.snapshot.read().expect("snapshot lock").report.clone())
    }

    pub fn artifact(&self, id: &str, name: &str) -> Result<Vec<u8>, ApiError> {
        let h = self.handle(id)?;
        let missing = || ApiError::new("E_NOT_FOUND", format!("artifact {name:?} not found"));
        tandem_core::dsl::check_save_path(name).map_err(|_| missing())?;
        let found = h.snapshot.read().expect("snapshot lock").artifacts.get(name).cloned();
        found.ok_or_else(missing)
    }

    pub fn router(self) -> Router {
        let limit = self.inner.config.max_upload_bytes + 1024;
        Router::new()
            .route("/v1/sessions", post(create_session))
            .route("/v1/sessions/{id}/dataset", post(attach_dataset))
            .route("/v1/sessions/{id}/instructions", post(submit_instruction))
            .route("/v1/sessions/{id}/events", get(stream_events))
            .route("/v1/sessions/{id}/report", get(get_report))
            .route("/v1/sessions/{id}/artifacts/{*name}", get(get_artifact))
            .layer(DefaultBodyLimit::max(limit))
            .with_state(self)
    }
}

#[derive(Debug, Default, Deserialize)]
struct CreateBody {
    #[serde(default)]
    seed: Option<u64>,
}

async fn create_session(State(svc): State<Service>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let parsed: CreateBody = if body.is_empty() {
        CreateBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new("E_BAD_REQUEST", e.to_string()))?
    };
    let id = svc.create_session(parsed.seed.unwrap_or(0))?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

#[derive(Debug, Deserialize)]
struct RoleQuery {
    role: Option<String>,
}

async fn attach_dataset(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<RoleQuery>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    svc.handle(&id)?;
    let role = DatasetRole::parse(q.role.as_deref().unwrap_or(""))?;
    Ok(Json(svc.attach(&id, role, body.to_vec()).await?))
}

#[derive(Debug, Deserialize)]
struct InstructionBody {
    text: String,
}

async fn submit_instruction(State(svc): State<Service>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    svc.handle(&id)?;
    let parsed: InstructionBody = serde_json::from_slice(&body).map_err(|e| ApiError::new("E_BAD_REQUEST", format!("expected {{\"text\"}}: {e}")))?;
    if parsed.text.trim().is_empty() {
        return Err(ApiError::new("E_BAD_REQUEST", "instruction text is empty"));
    }
    let seq = svc.submit(&id, parsed.text)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"seq": seq}))))
}

#[derive(Debug, Deserialize)]
struct FromQuery {
    from: Option<u64>,
}

async fn stream_events(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<FromQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|seq| seq + 1);
    let from = q.from.or(resume).unwrap_or(1);
    let events = svc.event_stream(&id, from)?.map(|e| {
        let data = serde_json::to_string(&e).expect("event serializes");
        Ok(Event::default().event(e.kind.as_str()).id(e.seq.to_string()).data(data))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn get_report(State(svc): State<Service>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(svc.report(&id)?))
}

async fn get_artifact(State(svc): State<Service>, Path((id, name)): Path<(String, String)>) -> Result<Response, ApiError> {
    let bytes = svc.artifact(&id, &name)?;
    let ctype = if name.ends_with(".csv") { "text/csv" } else { "application/octet-stream" };
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}

/// Binds `addr` and serves until the process exits. `on_bound` receives the
/// actual address (useful with port 0).
pub async fn serve(addr: SocketAddr, service: Service, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, service.router()).await
}
