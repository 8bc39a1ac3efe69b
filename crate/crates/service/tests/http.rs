use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use steer_core::env::EnvConfig;
use steer_service::{router, AppState, ServiceConfig};
use tower::ServiceExt;

fn state(export_dir: &std::path::Path, static_dir: Option<&std::path::Path>) -> AppState {
    AppState::new(ServiceConfig {
        env: EnvConfig::with_frame(16, 16),
        export_dir: export_dir.to_path_buf(),
        static_dir: static_dir.map(|p| p.to_path_buf()),
        ..ServiceConfig::default()
    })
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

#[tokio::test]
async fn health_reports_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (status, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["sessions"], 0);
    assert_eq!(body["active"], Value::Null);
}

#[tokio::test]
async fn second_driving_session_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (status, first) = call(&s, "POST", "/sessions", Some(json!({"mode": "demo", "track": "county"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(first["mode"], "demo");
    assert_eq!(first["track"], "county");
    let id = first["id"].as_str().unwrap().to_string();

    let (status, second) = call(&s, "POST", "/sessions", Some(json!({"mode": "demo"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(second["active"], id.as_str());
    let (status, _) = call(&s, "POST", "/sessions", Some(json!({"mode": "label-safety"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, spectate) = call(&s, "POST", "/sessions", Some(json!({"mode": "spectate"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_ne!(spectate["id"], id.as_str());

    let (_, health) = call(&s, "GET", "/health", None).await;
    assert_eq!(health["active"], id.as_str());
    assert_eq!(health["sessions"], 2);

    let (status, _) = call(&s, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&s, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&s, "POST", "/sessions", Some(json!({"mode": "label-reward"}))).await;
    assert_eq!(status, StatusCode::CREATED);
}

#[tokio::test]
async fn unknown_track_and_mode_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (status, body) = call(&s, "POST", "/sessions", Some(json!({"mode": "demo", "track": "atlantis"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("atlantis"));
    let (status, _) = call(&s, "POST", "/sessions", Some(json!({"mode": "drive"}))).await;
    assert!(status.is_client_error());
    let (_, health) = call(&s, "GET", "/health", None).await;
    assert_eq!(health["sessions"], 0);
}

#[tokio::test]
async fn export_requires_a_closed_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (_, created) = call(&s, "POST", "/sessions", Some(json!({"mode": "demo"}))).await;
    let id = created["id"].as_str().unwrap();
    let (status, _) = call(&s, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&s, "GET", "/sessions/nope/export", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, spectate) = call(&s, "POST", "/sessions", Some(json!({"mode": "spectate"}))).await;
    let sid = spectate["id"].as_str().unwrap();
    let (status, _) = call(&s, "GET", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn websocket_route_needs_an_upgrade_and_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (status, _) = call(&s, "GET", "/sessions/nope/ws", None).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn static_assets_are_served_at_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<!doctype html><title>console</title>").unwrap();
    std::fs::create_dir(assets.path().join("js")).unwrap();
    std::fs::write(assets.path().join("js/app.js"), "console.log(1)").unwrap();
    let s = state(dir.path(), Some(assets.path()));

    let (status, body) = call(&s, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.as_str().unwrap().contains("<title>console</title>"));
    let (status, body) = call(&s, "GET", "/js/app.js", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("console.log(1)".into()));
    let (status, _) = call(&s, "GET", "/missing.css", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn without_static_assets_unknown_paths_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), None);
    let (status, _) = call(&s, "GET", "/", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
