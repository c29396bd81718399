use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dkap_core::generation::LlmConfig;
use dkap_core::grammar::{generate_dataset, Grammar};
use dkap_core::harness::{run_episode_with_expert, BackendConfig, EpisodeConfig};
use dkap_core::{Domain, Instance, LexiconEntry, ParseRecord, Source};
use dkap_server::{router, AppState, KbView, ReportView, ServerConfig, SessionStatus, SessionSummary, SubmitResult};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(config: ServerConfig) -> Router {
    router(AppState::new(config).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json<T: DeserializeOwned>(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, T) {
    let (status, bytes) = call(app, method, uri, body).await;
    let parsed = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{status} {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, parsed)
}

fn synthetic(n: usize, seed: u64) -> Vec<Instance> {
    generate_dataset(&Grammar::builtin(), n, seed, 0).unwrap().into_iter().map(Into::into).collect()
}

fn ltl(x: &str, y: &str, gold: &[(&str, &str)]) -> Instance {
    Instance {
        x: x.into(),
        y: y.into(),
        k_gold: gold.iter().map(|(k, v)| LexiconEntry::new(k, v, Domain::Ltl, Source::Gold)).collect(),
        domain: Domain::Ltl,
    }
}

async fn create(app: &Router, stream: &[Instance], config: &EpisodeConfig) -> String {
    let (status, s): (_, SessionSummary) =
        call_json(app, Method::POST, "/sessions", Some(json!({ "stream": stream, "config": config }))).await;
    assert_eq!(status, StatusCode::CREATED);
    s.id
}

#[tokio::test]
async fn hundred_parses_finish_the_session() {
    let app = app(ServerConfig::default());
    let stream = synthetic(100, 11);
    let id = create(&app, &stream, &EpisodeConfig::default()).await;
    for t in 1..=100 {
        let (status, r): (_, ParseRecord) = call_json(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(r.t, t);
    }
    let (_, s): (_, SessionSummary) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s.status, SessionStatus::Finished);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, rep): (_, ReportView) = call_json(&app, Method::GET, &format!("/sessions/{id}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rep.report.steps, 100);
    assert_eq!(rep.report.reading_cost, 100);
}

#[tokio::test]
async fn expert_entry_is_retrieved_by_next_parse() {
    let app = app(ServerConfig::default());
    let stream = vec![
        ltl("the file is locked", "G( locked(file) )", &[("A is locked", "locked(A)")]),
        ltl("if a duplicate exists then the request fails", "G( exists(request) ⟹ fails(request) )", &[]),
    ];
    let mut config = EpisodeConfig::default();
    config.feedback_policy = dkap_core::FeedbackPolicy::None;
    let id = create(&app, &stream, &config).await;
    call(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;

    let entry = json!({ "entries": [{ "key": "duplicate exists", "value": "exists(X)" }] });
    let (status, res): (_, SubmitResult) = call_json(&app, Method::POST, &format!("/sessions/{id}/lexicon"), Some(entry.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(res.added.len(), 1);
    assert_eq!(res.added[0].source, Source::ExpertUi);

    let (_, again): (_, SubmitResult) = call_json(&app, Method::POST, &format!("/sessions/{id}/lexicon"), Some(entry)).await;
    assert_eq!((again.added.len(), again.duplicates, again.kb_size), (0, 1, 1));

    let (_, kb): (_, KbView) = call_json(&app, Method::GET, &format!("/sessions/{id}/kb"), None).await;
    assert_eq!(kb.entries[0].value, "exists(X)");

    let (_, r): (_, ParseRecord) = call_json(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;
    assert_eq!(r.retrieved.ranked[0].entry.key, "duplicate exists");
    assert_eq!(r.expert_added.len(), 1);
    assert_eq!(r.kb_size_after, 1);
}

#[tokio::test]
async fn malformed_entry_is_rejected_and_kb_unchanged() {
    let app = app(ServerConfig::default());
    let id = create(&app, &synthetic(3, 1), &EpisodeConfig::default()).await;
    let body = json!({ "entries": [{ "key": "fine", "value": "fine" }, { "key": "duplicate exists", "value": "  " }] });
    let (status, err): (_, Value) = call_json(&app, Method::POST, &format!("/sessions/{id}/lexicon"), Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "value");
    assert_eq!(err["index"], 1);
    let (_, kb): (_, KbView) = call_json(&app, Method::GET, &format!("/sessions/{id}/kb"), None).await;
    assert_eq!(kb.size, 0);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app(ServerConfig::default());
    for (method, path) in [(Method::GET, "next"), (Method::POST, "parse"), (Method::GET, "kb"), (Method::GET, "report")] {
        let (status, _) = call(&app, method, &format!("/sessions/nope/{path}"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    }
}

#[tokio::test]
async fn create_uses_server_defaults() {
    let app = app(ServerConfig { default_stream: Some(synthetic(2, 5)), ..Default::default() });
    let (status, s): (_, SessionSummary) = call_json(&app, Method::POST, "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!((s.t, s.total), (1, 2));
    let bare = self::app(ServerConfig::default());
    let (status, _) = call(&bare, Method::POST, "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn next_peeks_without_advancing() {
    let app = app(ServerConfig::default());
    let stream = synthetic(2, 3);
    let id = create(&app, &stream, &EpisodeConfig::default()).await;
    let (_, p1): (_, Value) = call_json(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    let (_, p2): (_, Value) = call_json(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(p1, p2);
    assert_eq!(p1["t"], 1);
    assert_eq!(p1["x"], stream[0].x);
}

#[tokio::test]
async fn scripted_session_replays_offline_harness() {
    let app = app(ServerConfig::default());
    let stream = synthetic(12, 77);
    let config = EpisodeConfig::default();
    let expert_entry = LexiconEntry::new("duplicate exists", "exists(X)", Domain::Ltl, Source::ExpertUi);
    let mut script = BTreeMap::new();
    script.insert(3, vec![expert_entry.clone()]);
    script.insert(7, vec![expert_entry.clone(), LexiconEntry::new("lease period", "lease_period", Domain::Ltl, Source::ExpertUi)]);

    let id = create(&app, &stream, &config).await;
    let mut api_lines = Vec::new();
    for t in 1..=stream.len() {
        if let Some(entries) = script.get(&t) {
            call(&app, Method::POST, &format!("/sessions/{id}/lexicon"), Some(json!({ "entries": entries }))).await;
        }
        let (_, record): (_, ParseRecord) = call_json(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;
        api_lines.push(serde_json::to_string(&record).unwrap());
    }
    let offline = run_episode_with_expert(&stream, &config, &script).unwrap();
    let offline_lines: Vec<String> = offline.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(api_lines.len(), offline_lines.len());
    for (t, (api, off)) in api_lines.iter().zip(&offline_lines).enumerate() {
        assert_eq!(api, off, "record {}", t + 1);
    }

    let (_, rep): (_, ReportView) = call_json(&app, Method::GET, &format!("/sessions/{id}/report"), None).await;
    assert_eq!(rep.report, offline.report);
}

#[tokio::test]
async fn sessions_persist_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServerConfig { data_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let stream = synthetic(4, 9);
    let first = app(config.clone());
    let id = create(&first, &stream, &EpisodeConfig::default()).await;
    call(&first, Method::POST, &format!("/sessions/{id}/parse"), None).await;
    assert!(dir.path().join(format!("{id}.json")).exists());

    let resumed = app(config);
    let (status, s): (_, SessionSummary) = call_json(&resumed, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s.t, 2);
    let (_, r): (_, ParseRecord) = call_json(&resumed, Method::POST, &format!("/sessions/{id}/parse"), None).await;
    assert_eq!(r.t, 2);
}

#[tokio::test]
async fn backend_failure_keeps_session_active() {
    let app = app(ServerConfig::default());
    let mut llm = LlmConfig::new("http://127.0.0.1:9/complete");
    llm.max_retries = 0;
    llm.timeout_secs = 2;
    let config = EpisodeConfig { generator: dkap_core::harness::GeneratorConfig { backend: BackendConfig::Llm(llm), ..Default::default() }, ..Default::default() };
    let id = create(&app, &synthetic(2, 1), &config).await;
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/parse"), None).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    let (_, s): (_, SessionSummary) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!((s.status, s.t), (SessionStatus::Active, 1));
}

#[tokio::test]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let app = app(ServerConfig { assets_dir: Some(dir.path().to_path_buf()), ..Default::default() });
    let (status, body) = call(&app, Method::GET, "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
}
