use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use futures_util::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use steer_core::dataset::{DatasetMeta, DemoDataset};
use steer_core::env::{Env, EnvConfig};
use steer_core::nets::ScalarNet;
use steer_core::rl::{rl_train, EpochMetrics, InitMode, RLConfig, RlObserver, RlSetup};
use steer_core::track::Track;
use steer_core::world::Action;
use steer_service::protocol::{decode_px, newest_rgb, ClientMsg, Key, ServerMsg};
use steer_service::{router, serve_state, AppState, ServiceConfig};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use tower::ServiceExt;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn env() -> EnvConfig {
    EnvConfig::with_frame(16, 16)
}

struct Server {
    state: AppState,
    addr: std::net::SocketAddr,
    _exports: tempfile::TempDir,
}

async fn start(tick: Duration) -> Server {
    let exports = tempfile::tempdir().unwrap();
    let state = AppState::new(ServiceConfig {
        env: env(),
        tick,
        export_dir: exports.path().to_path_buf(),
        ..ServiceConfig::default()
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_state(listener, state.clone()));
    Server {
        state,
        addr,
        _exports: exports,
    }
}

impl Server {
    async fn request(&self, method: &str, uri: &str, body: Option<Value>) -> (u16, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status().as_u16();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn create(&self, mode: &str) -> String {
        let (status, body) = self.request("POST", "/sessions", Some(json!({"mode": mode, "seed": 3}))).await;
        assert_eq!(status, 201, "{body}");
        body["id"].as_str().unwrap().to_string()
    }

    async fn attach(&self, id: &str) -> Ws {
        let (ws, _) = connect_async(format!("ws://{}/sessions/{id}/ws", self.addr)).await.unwrap();
        ws
    }
}

async fn send(ws: &mut Ws, msg: &ClientMsg) {
    ws.send(Message::Text(serde_json::to_string(msg).unwrap())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> ServerMsg {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server went quiet")
            .expect("stream ended")
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

/// Reads until an event of `kind` arrives, returning it and the frame ticks seen.
async fn until_event(ws: &mut Ws, kind: &str) -> (steer_service::protocol::Event, Vec<u64>) {
    let mut ticks = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        assert!(Instant::now() < deadline, "no {kind} event");
        match recv(ws).await {
            ServerMsg::Event(e) if e.kind == kind => return (e, ticks),
            ServerMsg::Frame { tick, .. } => ticks.push(tick),
            _ => {}
        }
    }
}

fn tape() -> Vec<(u64, Key)> {
    vec![
        (5, Key::Left),
        (11, Key::None),
        (60, Key::Right),
        (68, Key::None),
        (150, Key::Left),
        (153, Key::None),
    ]
}

fn headless(ticks: usize) -> DemoDataset {
    let mut env = Env::new(Arc::new(Track::bundled("county").unwrap()), &env());
    let changes = tape();
    let mut held = Action::NoAction;
    let (mut obs, mut actions) = (Vec::new(), Vec::new());
    for t in 0..ticks as u64 {
        if let Some(&(_, k)) = changes.iter().find(|(at, _)| *at == t) {
            held = k.into();
        }
        obs.push(env.observation().clone());
        actions.push(held);
        env.step(held);
    }
    DemoDataset::new(DatasetMeta::default(), obs, actions).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_client_reproduces_the_headless_dataset() {
    let server = start(Duration::from_millis(5)).await;
    let id = server.create("demo").await;
    let mut ws = server.attach(&id).await;
    for (tick, key) in tape() {
        send(&mut ws, &ClientMsg::Action { tick, key }).await;
    }
    let mut last = None;
    let mut frames = Vec::new();
    while frames.len() < 250 {
        if let ServerMsg::Frame { tick, w, h, px } = recv(&mut ws).await {
            assert_eq!((w, h), (16, 16));
            frames.push((tick, decode_px(&px, w, h).unwrap()));
            if let Some(prev) = last {
                assert!(tick > prev, "tick {tick} after {prev}");
            }
            last = Some(tick);
        }
    }
    send(&mut ws, &ClientMsg::Close).await;
    let (closed, _) = until_event(&mut ws, "closed").await;
    let count = closed.count.unwrap() as usize;
    assert!(count >= 250);

    let (status, body) = server.request("GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, 200, "{body}");
    let exported = DemoDataset::read(std::path::Path::new(body["path"].as_str().unwrap())).unwrap();
    assert_eq!(exported.len(), count);
    assert_eq!(exported.meta.provenance, format!("human:{id}"));
    let reference = headless(count);
    assert_eq!(exported.manifest().frames_sha256, reference.manifest().frames_sha256);
    assert_eq!(exported.targets, reference.targets);
    // Streamed pixels are the newest frame of each recorded observation.
    for (tick, px) in &frames {
        assert_eq!(px, &newest_rgb(&reference.observations[*tick as usize]));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn label_session_acknowledges_and_rejects() {
    let server = start(Duration::from_millis(5)).await;
    let id = server.create("label-reward").await;
    let mut ws = server.attach(&id).await;
    send(&mut ws, &ClientMsg::Label { tick: 20, value: 1 }).await;
    let (ack, _) = until_event(&mut ws, "label_ack").await;
    assert_eq!((ack.tick, ack.value), (Some(20), Some(1)));
    send(&mut ws, &ClientMsg::Label { tick: 40, value: 3 }).await;
    let (rej, _) = until_event(&mut ws, "rejected").await;
    assert!(rej.message.unwrap().contains('3'));
    send(&mut ws, &ClientMsg::Action { tick: 40, key: Key::Left }).await;
    let (rej, _) = until_event(&mut ws, "rejected").await;
    assert!(rej.message.unwrap().contains("action"));
    ws.send(Message::Text("{\"type\":\"steer\"}".into())).await.unwrap();
    let (err, _) = until_event(&mut ws, "error").await;
    assert!(err.message.unwrap().contains("malformed"));
    // Let the positive label cover some frames, then send a stale one.
    loop {
        if let ServerMsg::Frame { tick, .. } = recv(&mut ws).await {
            if tick >= 40 {
                break;
            }
        }
    }
    send(&mut ws, &ClientMsg::Label { tick: 0, value: -1 }).await;
    let (stale, _) = until_event(&mut ws, "stale").await;
    assert_eq!(stale.count, Some(1));
    send(&mut ws, &ClientMsg::Close).await;
    let (closed, _) = until_event(&mut ws, "closed").await;
    let count = closed.count.unwrap();
    assert!(count > 0);
    let (status, body) = server.request("GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["manifest"]["count"], count);
    assert_eq!(body["manifest"]["channel"], "reward");
    assert_eq!(body["manifest"]["kind"], "labeled");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_keep_pace_with_the_tick() {
    let tick = Duration::from_millis(10);
    let server = start(tick).await;
    let id = server.create("demo").await;
    let mut ws = server.attach(&id).await;
    let started = Instant::now();
    let mut ticks = Vec::new();
    while ticks.len() < 1000 {
        if let ServerMsg::Frame { tick, .. } = recv(&mut ws).await {
            ticks.push(tick);
        }
    }
    let elapsed = started.elapsed();
    assert!(ticks.windows(2).all(|w| w[1] > w[0]));
    let dropped = (ticks[999] - ticks[0] + 1) as usize - ticks.len();
    assert!(dropped <= 1, "{dropped} frames dropped");
    let nominal = tick * 999;
    assert!(elapsed < nominal * 6 / 5, "1000 frames took {elapsed:?}, nominal {nominal:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dropping_the_socket_pauses_the_world() {
    let server = start(Duration::from_millis(5)).await;
    let id = server.create("demo").await;
    let mut ws = server.attach(&id).await;
    let mut first = Vec::new();
    while first.len() < 20 {
        if let ServerMsg::Frame { tick, .. } = recv(&mut ws).await {
            first.push(tick);
        }
    }
    drop(ws);
    tokio::time::sleep(Duration::from_millis(100)).await;
    let mut ws = server.attach(&id).await;
    let resumed = loop {
        if let ServerMsg::Frame { tick, .. } = recv(&mut ws).await {
            break tick;
        }
    };
    // At most a couple of ticks elapse between the drop and the loop noticing.
    assert!(resumed > first[19] && resumed <= first[19] + 4, "resumed at {resumed}");
}

struct Relay(steer_service::hub::Publisher);

impl RlObserver for Relay {
    fn on_tick(
        &mut self,
        tick: u64,
        obs: &steer_core::render::Observation,
        control: steer_core::safety::Control,
        events: &steer_core::rl::TickEvents,
    ) {
        self.0.on_tick(tick, obs, control, events);
        std::thread::sleep(Duration::from_millis(1));
    }

    fn on_takeover(&mut self, tick: u64, on: bool) {
        self.0.on_takeover(tick, on);
    }

    fn on_epoch(&mut self, m: &EpochMetrics) {
        self.0.on_epoch(m);
        // Give the spectator time to attach between epochs.
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn spectators_replay_history_then_follow_the_trainer() {
    let server = start(Duration::from_millis(5)).await;
    let driving = server.create("demo").await;
    let spectate = server.create("spectate").await;
    assert_ne!(driving, spectate);

    let publisher = server.state.hub().publisher();
    let trainer = tokio::task::spawn_blocking(move || {
        let cfg = RLConfig {
            epoch_frames: 40,
            total_frames: 400,
            init_mode: InitMode::Random,
            seed: 1,
            ..RLConfig::default()
        };
        let env = env();
        let shape = env.obs_shape();
        let reward = ScalarNet::new(shape, 1).unwrap();
        let setup = RlSetup {
            config: &cfg,
            track: Arc::new(Track::bundled("county").unwrap()),
            env_config: &env,
            reward_net: &reward,
            metric_net: None,
            safety: None,
            policy: None,
        };
        rl_train(&setup, &mut Relay(publisher)).unwrap().metrics
    });

    // Attach once the trainer has published a few epochs.
    while server.state.hub().attach().0.len() < 3 {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut ws = server.attach(&spectate).await;
    let mut epochs = Vec::new();
    let mut frames = 0;
    while epochs.len() < 10 {
        match recv(&mut ws).await {
            ServerMsg::Metrics(m) => epochs.push(m.epoch),
            ServerMsg::Frame { .. } => frames += 1,
            _ => {}
        }
    }
    let metrics = trainer.await.unwrap();
    assert_eq!(epochs, (0..10).collect::<Vec<_>>());
    assert_eq!(metrics.len(), 10);
    assert!(frames > 0, "live frames reach spectators");

    send(&mut ws, &ClientMsg::Action { tick: 0, key: Key::Left }).await;
    let (rej, _) = until_event(&mut ws, "rejected").await;
    assert!(rej.message.unwrap().contains("read-only"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn watched_metrics_file_feeds_spectators() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let line = |epoch| {
        let m = EpochMetrics {
            epoch,
            avg_reward: 0.5,
            ..EpochMetrics::default()
        };
        serde_json::to_string(&m).unwrap() + "\n"
    };
    std::fs::write(&path, line(0) + &line(1) + "{\"epoch\":").unwrap();
    let hub = steer_service::hub::Hub::new(16, 100);
    let task = tokio::spawn(hub.clone().follow_metrics(path.clone(), Duration::from_millis(10)));
    let wait = |n: usize| {
        let hub = hub.clone();
        async move {
            for _ in 0..500 {
                if hub.attach().0.len() >= n {
                    return;
                }
                tokio::time::sleep(Duration::from_millis(5)).await;
            }
        }
    };
    wait(2).await;
    std::fs::write(&path, line(0) + &line(1) + &line(2)).unwrap();
    wait(3).await;
    task.abort();
    let epochs: Vec<usize> = hub
        .attach()
        .0
        .iter()
        .map(|m| match m {
            ServerMsg::Metrics(m) => m.epoch,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);
}
