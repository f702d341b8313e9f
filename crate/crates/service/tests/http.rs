use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use segloop_core::codec::{image_from_png, image_to_png, to_base64};
use segloop_core::data::{synthesize_case, SynthConfig};
use segloop_core::{InteractionEvent, Model, ModelConfig, Polarity, Rle, Session, SessionConfig, SessionMode};
use segloop_service::api::{AcceptResponse, Health, SessionView};
use segloop_service::{router, AppState, ServiceConfig};

const SHA: &str = "feedface";

fn model() -> Arc<Model> {
    static M: OnceLock<Arc<Model>> = OnceLock::new();
    M.get_or_init(|| Arc::new(Model::init(ModelConfig::compact()).unwrap())).clone()
}

fn png_b64(i: usize) -> String {
    let case = synthesize_case(&SynthConfig::default(), i).unwrap();
    to_base64(&image_to_png(case.image()).unwrap())
}

fn app_with(config: ServiceConfig, sha: &str) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::new(model(), sha, &config).unwrap());
    let app = router(Arc::clone(&state), &config).unwrap();
    (state, app)
}

fn app() -> Router {
    app_with(ServiceConfig::default(), SHA).1
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
    raw(app, method, uri, body).await
}

async fn raw(app: &Router, method: Method, uri: &str, body: Body) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn create(app: &Router, case: usize, seed: u64) -> SessionView {
    let (st, v) =
        call(app, Method::POST, "/sessions", Some(json!({"image_png": png_b64(case), "config": {"seed": seed}}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

fn click(iteration: usize) -> Value {
    serde_json::to_value(InteractionEvent::click(iteration, 30, 30, Polarity::Foreground)).unwrap()
}

async fn post_event(app: &Router, id: &str, ev: Value) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/events"), Some(ev)).await
}

#[tokio::test]
async fn http_session_matches_the_engine() {
    let app = app();
    let view = create(&app, 0, 5).await;

    let bytes = segloop_core::codec::from_base64(&png_b64(0)).unwrap();
    let image = image_from_png("upload", &bytes).unwrap();
    let m = model();
    let cfg = SessionConfig { seed: 5, ..SessionConfig::for_model(&m) };
    let mut direct = Session::create("x", m, image, cfg, SessionMode::Adaptive).unwrap();

    let first = direct.last_soft().unwrap().binarized().clone();
    assert_eq!(view.soft.as_ref().unwrap().mask.decode().unwrap(), first);
    let regions = direct.candidates().unwrap().regions();
    assert_eq!(view.candidates.len(), regions.len());
    for (c, r) in view.candidates.iter().zip(regions) {
        assert_eq!(c.region.mask.decode().unwrap(), *r.binarized());
    }

    let sel = InteractionEvent::selection(0, 1);
    let (st, v) = post_event(&app, &view.session_id, serde_json::to_value(&sel).unwrap()).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    direct.apply_selection(sel).unwrap();
    let (st, v) = post_event(&app, &view.session_id, click(1)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    direct.apply_selection(InteractionEvent::click(1, 30, 30, Polarity::Foreground)).unwrap();
    let after: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(after.iteration, 2);
    assert_eq!(after.history, direct.history());

    let (st, v) = call(&app, Method::POST, &format!("/sessions/{}/accept", view.session_id), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let acc: AcceptResponse = serde_json::from_value(v).unwrap();
    assert_eq!(acc.mask.decode().unwrap(), direct.accept().unwrap());
    assert_eq!(acc.mask, Rle::encode(&direct.accept().unwrap()));
}

#[tokio::test]
async fn accepted_sessions_reject_events_but_accept_again() {
    let app = app();
    let view = create(&app, 1, 0).await;
    let uri = format!("/sessions/{}/accept", view.session_id);
    let (st, first) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(st, StatusCode::OK);
    let (st, again) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(first, again);
    let (st, v) = post_event(&app, &view.session_id, click(0)).await;
    assert_eq!(st, StatusCode::CONFLICT, "{v}");
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let (st, _) = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = post_event(&app, "nope", click(0)).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let view = create(&app, 2, 0).await;
    let id = &view.session_id;
    for bad in [
        json!({"kind": "click", "iteration": 0}),
        json!({"kind": "click", "iteration": 3, "click_coords": [1, 1], "polarity": "foreground"}),
        json!({"kind": "candidate_selection", "iteration": 0, "candidate_index": 99}),
        json!({"kind": "click", "iteration": 0, "click_coords": [999, 1], "polarity": "foreground"}),
        json!("not an event"),
    ] {
        let (st, v) = post_event(&app, id, bad.clone()).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{bad} → {v}");
    }
    let (st, v) = raw(&app, Method::POST, &format!("/sessions/{id}/events"), Body::from("{oops")).await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");
    let (_, now) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(now["iteration"], 0);
    assert_eq!(now["history"], json!([]));

    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"config": {"seed": 1}}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) =
        call(&app, Method::POST, "/sessions", Some(json!({"image_png": png_b64(0), "config": {"bogus": 1}}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"image_png": "!!"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"case_id": "missing"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_requests_are_413() {
    let (_, app) = app_with(ServiceConfig { max_body_bytes: 1024, ..Default::default() }, SHA);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"image_png": png_b64(0)}))).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);

    let app = self::app();
    let big = segloop_core::ImageSample::new("big", 128, 128, 1, vec![0.5; 128 * 128]).unwrap();
    let body = json!({"image_png": to_base64(&image_to_png(&big).unwrap())});
    let (st, v) = call(&app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE, "{v}");
}

#[tokio::test]
async fn sessions_are_isolated() {
    let app = app();
    let a = create(&app, 0, 3).await;
    let b = create(&app, 0, 3).await;
    assert_ne!(a.session_id, b.session_id);
    let (st, _) = post_event(&app, &a.session_id, click(0)).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b_now) = call(&app, Method::GET, &format!("/sessions/{}", b.session_id), None).await;
    let b_now: SessionView = serde_json::from_value(b_now).unwrap();
    assert_eq!(b_now.iteration, 0);
    assert_eq!(b_now.soft, b.soft);
    assert_eq!(b_now.candidates, b.candidates);

    let (st, _) = call(&app, Method::DELETE, &format!("/sessions/{}", a.session_id), None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (st, _) = call(&app, Method::GET, &format!("/sessions/{}", a.session_id), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn healthz_reports_the_checkpoint() {
    let app = app();
    let (st, v) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(st, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    assert_eq!(h.checkpoint_sha256, SHA);
    assert_eq!(h.sessions, 0);
}

#[tokio::test]
async fn idle_sessions_expire_and_resume() {
    let (state, app) = app_with(ServiceConfig { idle_timeout_secs: 0, ..Default::default() }, SHA);
    let view = create(&app, 0, 4).await;
    tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    assert_eq!(state.expire_idle().await, 1);

    let (st, v) = post_event(&app, &view.session_id, click(0)).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(v["resume_hint"].as_str().unwrap().contains("resume"), "{v}");

    let (st, v) = call(&app, Method::POST, &format!("/sessions/{}/resume", view.session_id), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let resumed: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(resumed.soft, view.soft);
    assert_eq!(resumed.candidates, view.candidates);
}

fn journaled(dir: &Path) -> ServiceConfig {
    ServiceConfig { journal_dir: Some(dir.to_path_buf()), ..Default::default() }
}

#[tokio::test]
async fn journals_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(journaled(dir.path()), SHA);
    let view = create(&app, 3, 9).await;
    let (_, v) = post_event(&app, &view.session_id, click(0)).await;
    let before: SessionView = serde_json::from_value(v).unwrap();

    let (state, app2) = app_with(journaled(dir.path()), SHA);
    assert_eq!(state.resume_from_journals().unwrap(), 1);
    let (st, v) = call(&app2, Method::GET, &format!("/sessions/{}", view.session_id), None).await;
    assert_eq!(st, StatusCode::OK);
    let after: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(after.iteration, before.iteration);
    assert_eq!(after.history, before.history);
    assert_eq!(after.soft, before.soft);
    assert_eq!(after.candidates, before.candidates);

    let (other, _) = app_with(journaled(dir.path()), "another");
    assert_eq!(other.resume_from_journals().unwrap(), 0);
}
