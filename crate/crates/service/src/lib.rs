//! HTTP control plane and WebSocket streams for teaching sessions and
//! training spectators.

pub mod hub;
pub mod protocol;
pub mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::json;
use steer_core::env::EnvConfig;
use steer_core::track::Track;
use tokio::sync::{broadcast, mpsc};
use tower_http::services::ServeDir;

use crate::hub::Hub;
use crate::protocol::{frame_msg, ClientMsg, Event, ServerMsg};
use crate::session::{Ingest, Mode, Recording, SessionCore, SessionError, SessionLimits};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub env: EnvConfig,
    pub tick: Duration,
    pub limits: SessionLimits,
    /// Exported datasets go to `<export_dir>/<session id>`.
    pub export_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    /// Metrics file whose records are streamed to spectators.
    pub watch: Option<PathBuf>,
    /// Per-client backlog before frames are skipped.
    pub backlog: usize,
    pub history_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            env: EnvConfig::default(),
            tick: Duration::from_millis(100),
            limits: SessionLimits::default(),
            export_dir: PathBuf::from("exports"),
            static_dir: None,
            watch: None,
            backlog: 256,
            history_limit: 100_000,
        }
    }
}

pub struct SessionHandle {
    pub id: String,
    pub mode: Mode,
    core: Option<Mutex<SessionCore>>,
    out: broadcast::Sender<ServerMsg>,
    running: Mutex<bool>,
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<SessionHandle>>>>,
    next_id: Arc<AtomicU64>,
    hub: Hub,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let hub = Hub::new(config.backlog, config.history_limit);
        AppState {
            config: Arc::new(config),
            sessions: Arc::default(),
            next_id: Arc::new(AtomicU64::new(1)),
            hub,
        }
    }

    /// Feed for an in-process trainer.
    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    fn active_driver(&self) -> Option<Arc<SessionHandle>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .values()
            .find(|s| s.mode.drives() && s.core.as_ref().is_some_and(|c| !c.lock().expect("core").is_closed()))
            .cloned()
    }

    fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.lock().expect("sessions lock").get(id).cloned()
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub mode: Mode,
    #[serde(default = "default_track")]
    pub track: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_track() -> String {
    "county".into()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let sessions = state.sessions.lock().expect("sessions lock").len();
    Json(json!({
        "status": "ok",
        "sessions": sessions,
        "active": state.active_driver().map(|s| s.id.clone()),
        "spectators": state.hub.spectators(),
    }))
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateSession>) -> Response {
    let track = match Track::resolve(&req.track) {
        Ok(t) => Arc::new(t),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    // The check and the insert share one lock so two creates cannot both win.
    let mut sessions = state.sessions.lock().expect("sessions lock");
    if req.mode.drives() {
        let active = sessions
            .values()
            .find(|s| s.mode.drives() && s.core.as_ref().is_some_and(|c| !c.lock().expect("core").is_closed()));
        if let Some(active) = active {
            return (
                StatusCode::CONFLICT,
                Json(json!({ "error": "a driving session is already active", "active": active.id })),
            )
                .into_response();
        }
    }
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let core = req.mode.drives().then(|| {
        Mutex::new(SessionCore::new(
            id.clone(),
            req.mode,
            track.clone(),
            &state.config.env,
            req.seed,
            state.config.limits,
        ))
    });
    let (out, _) = broadcast::channel(state.config.backlog.max(1));
    sessions.insert(
        id.clone(),
        Arc::new(SessionHandle {
            id: id.clone(),
            mode: req.mode,
            core,
            out,
            running: Mutex::new(false),
        }),
    );
    (
        StatusCode::CREATED,
        Json(json!({ "id": id, "mode": req.mode, "track": track.name() })),
    )
        .into_response()
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let removed = state.sessions.lock().expect("sessions lock").remove(&id);
    match removed {
        Some(s) => {
            if let Some(core) = &s.core {
                core.lock().expect("core").close();
            }
            let _ = s.out.send(Event::new("closed").into());
            StatusCode::NO_CONTENT.into_response()
        }
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

async fn export_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(s) = state.session(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let Some(core) = &s.core else {
        return error(StatusCode::BAD_REQUEST, "spectate sessions record nothing");
    };
    let recording = core.lock().expect("core").recording();
    let dir = state.config.export_dir.join(&id);
    let written = match recording {
        Ok(Recording::Demo(d)) => d.write(&dir),
        Ok(Recording::Labeled(d)) => d.write(&dir),
        Err(e @ SessionError::NotClosed) => return error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    match written {
        Ok(manifest) => Json(json!({ "path": dir, "manifest": manifest })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn attach(State(state): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    match state.session(&id) {
        Some(s) => ws.on_upgrade(move |socket| client(state, s, socket)),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

fn encode(msg: &ServerMsg) -> Message {
    Message::Text(serde_json::to_string(msg).expect("messages serialize"))
}

/// Drives a session at the configured tick rate while anyone is attached.
async fn tick_loop(state: AppState, session: Arc<SessionHandle>) {
    let core = session.core.as_ref().expect("driving session");
    let mut interval = tokio::time::interval(state.config.tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    interval.tick().await;
    loop {
        let frame = {
            let c = core.lock().expect("core");
            if c.is_closed() {
                break;
            }
            frame_msg(c.tick(), c.observation())
        };
        if session.out.receiver_count() == 0 || session.out.send(frame).is_err() {
            break;
        }
        interval.tick().await;
        let stepped = core.lock().expect("core").step();
        let Ok(stepped) = stepped else { break };
        let e = stepped.events;
        for (hit, kind) in [
            (e.off_road_entry, "off_road_entry"),
            (e.on_road_entry, "on_road_entry"),
            (e.restart_stuck, "restart_stuck"),
            (e.restart_wrong_direction, "restart_wrong_direction"),
        ] {
            if hit {
                let _ = session.out.send(Event::new(kind).at(stepped.tick).into());
            }
        }
    }
    *session.running.lock().expect("running") = false;
}

fn start_ticking(state: &AppState, session: &Arc<SessionHandle>) {
    let mut running = session.running.lock().expect("running");
    if !*running {
        *running = true;
        tokio::spawn(tick_loop(state.clone(), session.clone()));
    }
}

fn reply_for(result: Result<Ingest, SessionError>, tick: u64, label: Option<i64>, stale: u64) -> Option<ServerMsg> {
    match result {
        Ok(Ingest::Queued) => label.map(|v| {
            let mut e = Event::new("label_ack").at(tick);
            e.value = Some(v);
            e.into()
        }),
        Ok(Ingest::Stale) => {
            let mut e = Event::new("stale").at(tick);
            e.count = Some(stale);
            Some(e.into())
        }
        Err(e) => Some(Event::new("rejected").at(tick).message(e.to_string()).into()),
    }
}

async fn client(state: AppState, session: Arc<SessionHandle>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (direct_tx, mut direct_rx) = mpsc::channel::<ServerMsg>(state.config.backlog.max(1));

    let (history, mut feed) = match &session.core {
        Some(_) => (Vec::new(), session.out.subscribe()),
        None => state.hub.attach(),
    };
    if session.core.is_some() {
        start_ticking(&state, &session);
    }

    let writer = tokio::spawn(async move {
        for msg in &history {
            if sink.send(encode(msg)).await.is_err() {
                return;
            }
        }
        loop {
            let msg = tokio::select! {
                m = feed.recv() => match m {
                    Ok(m) => m,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                m = direct_rx.recv() => match m {
                    Some(m) => m,
                    None => break,
                },
            };
            let closing = matches!(&msg, ServerMsg::Event(e) if e.kind == "closed");
            if sink.send(encode(&msg)).await.is_err() || closing {
                break;
            }
        }
        let _ = sink.close().await;
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let parsed: Result<ClientMsg, _> = serde_json::from_str(&text);
        let reply = match (parsed, &session.core) {
            (Err(e), _) => Some(Event::new("error").message(format!("malformed message: {e}")).into()),
            (Ok(_), None) => Some(Event::new("rejected").message("spectate sessions are read-only").into()),
            (Ok(ClientMsg::Action { tick, key }), Some(core)) => {
                let mut c = core.lock().expect("core");
                let r = c.ingest_action(tick, key.into());
                reply_for(r, tick, None, c.stale_dropped())
            }
            (Ok(ClientMsg::Label { tick, value }), Some(core)) => {
                let mut c = core.lock().expect("core");
                let r = c.ingest_label(tick, value);
                reply_for(r, tick, Some(value), c.stale_dropped())
            }
            (Ok(ClientMsg::Close), Some(core)) => {
                let recorded = {
                    let mut c = core.lock().expect("core");
                    c.close();
                    c.recorded()
                };
                let mut e = Event::new("closed");
                e.count = Some(recorded as u64);
                let _ = session.out.send(e.clone().into());
                Some(e.into())
            }
        };
        if let Some(r) = reply {
            if direct_tx.send(r).await.is_err() {
                break;
            }
        }
    }
    drop(direct_tx);
    let _ = writer.await;
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", axum::routing::delete(delete_session))
        .route("/sessions/:id/export", get(export_session))
        .route("/sessions/:id/ws", get(attach))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the listener fails.
pub async fn serve_state(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    if let Some(path) = state.config.watch.clone() {
        tokio::spawn(state.hub.clone().follow_metrics(path, Duration::from_millis(500)));
    }
    axum::serve(listener, router(state)).await
}

pub async fn serve(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    serve_state(listener, AppState::new(config)).await
}
