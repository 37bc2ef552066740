//! Interactive sessions in which a person answers the navigator's questions.
//!
//! Routes:
//!
//! - `POST /sessions` starts an episode and runs it up to the first question.
//! - `GET /sessions/{id}` returns the state view.
//! - `POST /sessions/{id}/answer` feeds an answer and runs to the next question.
//! - `DELETE /sessions/{id}` drops the session.
//! - `GET /sessions/{id}/events` upgrades to a WebSocket that pushes a state
//!   view whenever a question becomes pending or the episode finishes.
//!
//! Payload schemas live in `schemas/`.

pub mod view;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use uuid::Uuid;
use vdn_core::askpolicy::AskPolicy;
use vdn_core::dialogue::{detokenize, tokenize};
use vdn_core::harness::{DialogueSpec, EpisodeRunner, EpisodeSpec, Oracle, Resources, RunConfig};
use vdn_core::navgraph::NavGraph;

use view::{state_view, ProgressView, StateView, Status, TranscriptEntry};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub schema: u32,
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub enum ApiError {
    SessionNotFound(String),
    NoPendingQuestion,
    InvalidConfig(String),
    BadRequest(String),
    Runtime(String),
}

impl ApiError {
    fn code(&self) -> (StatusCode, &'static str) {
        match self {
            ApiError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            ApiError::NoPendingQuestion => (StatusCode::CONFLICT, "no_pending_question"),
            ApiError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_config"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::Runtime(_) => (StatusCode::INTERNAL_SERVER_ERROR, "runtime"),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApiError::SessionNotFound(id) => write!(f, "session `{id}` not found"),
            ApiError::NoPendingQuestion => f.write_str("the session has no pending question"),
            ApiError::InvalidConfig(m) | ApiError::BadRequest(m) | ApiError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<vdn_core::Error> for ApiError {
    fn from(e: vdn_core::Error) -> Self {
        match e {
            vdn_core::Error::InvalidConfig(m) => ApiError::InvalidConfig(m),
            vdn_core::Error::UnknownNode(_) | vdn_core::Error::DimensionMismatch(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Runtime(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.code();
        let body = ErrorBody {
            schema: view::SCHEMA_VERSION,
            error: code.into(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

/// Body of `POST /sessions`. Exactly one of `episode` and `spec` is needed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Id of an episode in the server's dataset.
    #[serde(default)]
    pub episode: Option<String>,
    /// An episode given inline.
    #[serde(default)]
    pub spec: Option<EpisodeSpec>,
    /// Overrides the configured ask policy for this session.
    #[serde(default)]
    pub ask: Option<AskPolicy>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAnswer {
    pub answer: String,
    /// Step of the question being answered. When given with `round`, a
    /// mismatch with the pending question is rejected, which makes
    /// resubmission safe.
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default)]
    pub round: Option<usize>,
}

struct Session {
    runner: EpisodeRunner,
    graph: Arc<NavGraph>,
    transcript: Vec<TranscriptEntry>,
    last_seen: Instant,
    events: broadcast::Sender<String>,
}

impl Session {
    fn view(&self, id: &str) -> StateView {
        state_view(id, &self.runner, &self.transcript, self.progress())
    }

    fn progress(&self) -> ProgressView {
        let state = self.runner.state();
        let spec = self.runner.spec();
        let d = |n| self.graph.euclidean_distance(n, &spec.target_node).unwrap_or(f64::NAN);
        let now = d(&state.current);
        ProgressView {
            steps: state.visited.len() - 1,
            path_length: state.path_length,
            distance_to_target: now,
            goal_progress: d(&spec.start) - now,
        }
    }

    fn publish(&self, id: &str) {
        let v = self.view(id);
        let event = match v.status {
            Status::AwaitingAnswer => "question_pending",
            Status::Finished => "finished",
        };
        let msg = serde_json::json!({ "schema": view::SCHEMA_VERSION, "event": event, "view": v });
        // No subscribers is fine.
        let _ = self.events.send(msg.to_string());
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

/// Shared server state: preloaded resources and the live sessions.
#[derive(Clone)]
pub struct AppState {
    config: Arc<RunConfig>,
    resources: Arc<Resources>,
    episodes: Arc<BTreeMap<String, EpisodeSpec>>,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
    idle_timeout: Duration,
}

impl AppState {
    /// `config.dialogue` must be the human backend.
    pub fn new(config: RunConfig, resources: Resources, episodes: Vec<EpisodeSpec>) -> Result<Self, ApiError> {
        if config.dialogue != DialogueSpec::Human {
            return Err(ApiError::InvalidConfig("the session server needs `dialogue.backend = \"human\"`".into()));
        }
        config.validate()?;
        Ok(AppState {
            config: Arc::new(config),
            resources: Arc::new(Resources {
                oracle: Oracle::Human,
                ..resources
            }),
            episodes: Arc::new(episodes.into_iter().map(|e| (e.id.clone(), e)).collect()),
            sessions: Arc::default(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        })
    }

    pub fn with_idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = timeout;
        self
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    /// Drops sessions idle for longer than the timeout. Sessions busy with
    /// a request are kept.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_seen) < self.idle_timeout,
            Err(_) => true,
        });
        before - table.len()
    }

    fn create(&self, req: CreateSession) -> Result<(String, StateView), ApiError> {
        let spec = match (req.episode, req.spec) {
            (Some(id), None) => self
                .episodes
                .get(&id)
                .cloned()
                .ok_or_else(|| ApiError::BadRequest(format!("unknown episode `{id}`")))?,
            (None, Some(spec)) => spec,
            _ => return Err(ApiError::BadRequest("give exactly one of `episode` and `spec`".into())),
        };
        let mut config = (*self.config).clone();
        if let Some(ask) = req.ask {
            ask.validate()?;
            config.ask = ask;
        }
        let graph = self.resources.graph(&spec.env)?;
        let mut runner = EpisodeRunner::new(&config, spec, graph.clone(), self.resources.policy.clone(), Oracle::Human)?;
        runner.advance()?;
        let id = Uuid::new_v4().to_string();
        let (events, _) = broadcast::channel(16);
        let session = Session {
            runner,
            graph,
            transcript: Vec::new(),
            last_seen: Instant::now(),
            events,
        };
        let view = session.view(&id);
        self.sessions
            .lock()
            .expect("session table")
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok((id, view))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/answer", post(submit_answer))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Serves until the process is stopped, sweeping idle sessions in the
/// background.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    let sweeper = state.clone();
    let period = (state.idle_timeout / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.sweep(Instant::now());
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<StateView>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let (id, view) = state.create(req)?;
    log::info!("session {id} started on episode {}", view.episode.id);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<StateView>, ApiError> {
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    s.last_seen = Instant::now();
    Ok(Json(s.view(&id)))
}

async fn submit_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<SubmitAnswer>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<StateView>, ApiError> {
    let handle = state.session(&id)?;
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let mut s = handle.lock().await;
    s.last_seen = Instant::now();
    let q = s.runner.pending().cloned().ok_or(ApiError::NoPendingQuestion)?;
    if req.t.is_some_and(|t| t != q.t) || req.round.is_some_and(|r| r != q.round) {
        return Err(ApiError::NoPendingQuestion);
    }
    s.runner.answer(&req.answer)?;
    s.transcript.push(TranscriptEntry {
        t: q.t,
        round: q.round,
        question: detokenize(&q.question),
        answer: detokenize(&tokenize(&req.answer)),
    });
    s.runner.advance()?;
    s.publish(&id);
    Ok(Json(s.view(&id)))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state
        .sessions
        .lock()
        .expect("session table")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or(ApiError::SessionNotFound(id))
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    let (rx, first) = {
        let s = handle.lock().await;
        let v = s.view(&id);
        let event = match v.status {
            Status::AwaitingAnswer => "question_pending",
            Status::Finished => "finished",
        };
        let first = serde_json::json!({ "schema": view::SCHEMA_VERSION, "event": event, "view": v }).to_string();
        (s.events.subscribe(), first)
    };
    Ok(ws.on_upgrade(move |socket| push_events(socket, rx, first)))
}

async fn push_events(mut socket: WebSocket, mut rx: broadcast::Receiver<String>, first: String) {
    if socket.send(Message::Text(first.into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
