//! Network backends against in-process stub services.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use dkap_core::generation::{GenerationError, LlmConfig};
use dkap_core::harness::{
    run_episode, BackendConfig, EmbedderConfig, EpisodeConfig, GeneratorConfig, HarnessError, RetrieverConfig,
    RetrieverKind,
};
use dkap_core::retrieval::{EmbeddingProvider, HashingEmbedder, HttpEmbedderConfig, RetrievalError};
use dkap_core::{Domain, Instance, LexiconEntry, Source};
use serde_json::{json, Value};

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// One-connection-per-request HTTP stub. Records every request body.
struct Stub {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
}

impl Stub {
    fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&bodies);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some((name, value)) = line.split_once(':') {
                        if name.eq_ignore_ascii_case("content-length") {
                            len = value.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let call = {
                    let mut log = log.lock().unwrap();
                    log.push(body.clone());
                    log.len()
                };
                let (status, reply) = handler(call, &body);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Self { url, bodies }
    }

    fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

fn stream() -> Vec<Instance> {
    let e = |k: &str, v: &str| LexiconEntry::new(k, v, Domain::Ltl, Source::Gold);
    vec![
        Instance {
            x: "If the file is locked, then an error returned.".into(),
            y: "G( locked(file) ⟹ return(error) )".into(),
            k_gold: vec![e("A is locked", "locked(A)"), e("A returned", "return(A)")],
            domain: Domain::Ltl,
        },
        Instance {
            x: "If the directory is locked, then an error returned.".into(),
            y: "G( locked(directory) ⟹ return(error) )".into(),
            k_gold: vec![e("A is locked", "locked(A)"), e("A returned", "return(A)")],
            domain: Domain::Ltl,
        },
    ]
}

fn llm_config(url: &str, exemplars: Option<std::path::PathBuf>) -> EpisodeConfig {
    let mut llm = LlmConfig::new(url);
    llm.exemplars = exemplars;
    llm.timeout_secs = 5;
    EpisodeConfig {
        generator: GeneratorConfig { backend: BackendConfig::Llm(llm), ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn llm_completion_is_recorded_verbatim() {
    let canned = json!({ "text": " G( locked(file) ⟹ return(error) )\n", "usage": { "tokens": 9 } }).to_string();
    let reply = canned.clone();
    let stub = Stub::start(Box::new(move |_, _| (200, reply.clone())));

    let dir = tempfile::tempdir().unwrap();
    let exemplars = dir.path().join("exemplars.jsonl");
    let rows: String = (0..5).map(|i| json!({ "x": format!("sentence {i}"), "y": format!("formula{i}") }).to_string() + "\n").collect();
    std::fs::write(&exemplars, rows).unwrap();

    let out = run_episode(&stream(), &llm_config(&stub.url, Some(exemplars))).unwrap();
    let r = &out.records[0];
    assert_eq!(r.y_hat, "G( locked(file) ⟹ return(error) )");
    assert_eq!(r.backend.raw_response.as_deref(), Some(canned.as_str()));
    assert_eq!(r.backend.backend, "llm:default");

    let bodies = stub.bodies();
    assert_eq!(bodies.len(), 2);
    assert_eq!(bodies[0]["temperature"], 0.01);
    let prompt = bodies[0]["prompt"].as_str().unwrap();
    assert_eq!(prompt.matches("Input:").count(), 4, "three exemplars plus the query");
    assert!(prompt.contains("sentence 2") && !prompt.contains("sentence 3"));
    assert!(prompt.contains(&r.input_text));
    // Second prompt carries the entries learned from the first parse.
    assert!(bodies[1]["prompt"].as_str().unwrap().contains("A is locked => locked(A)"));
}

#[test]
fn empty_completion_aborts_episode() {
    let stub = Stub::start(Box::new(|_, _| (200, json!({ "text": "  " }).to_string())));
    let abort = run_episode(&stream(), &llm_config(&stub.url, None)).unwrap_err();
    assert!(abort.records.is_empty());
    assert!(matches!(abort.error, HarnessError::Generation { t: 1, source: GenerationError::EmptyOutput }));
}

#[test]
fn server_errors_are_retried() {
    let stub = Stub::start(Box::new(|call, _| {
        if call == 1 {
            (503, "{}".into())
        } else {
            (200, json!({ "text": "G( x )" }).to_string())
        }
    }));
    let out = run_episode(&stream()[..1], &llm_config(&stub.url, None)).unwrap();
    assert_eq!(out.records[0].y_hat, "G( x )");
    assert_eq!(stub.bodies().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(Box::new(|_, _| (400, r#"{"error":"bad"}"#.into())));
    let abort = run_episode(&stream()[..1], &llm_config(&stub.url, None)).unwrap_err();
    assert!(matches!(abort.error, HarnessError::Generation { source: GenerationError::Backend(_), .. }));
    assert_eq!(stub.bodies().len(), 1);
}

fn dense_config(url: &str, dim: usize) -> EpisodeConfig {
    EpisodeConfig {
        retriever: RetrieverConfig {
            kind: RetrieverKind::Dense,
            embedder: Some(EmbedderConfig::Http(HttpEmbedderConfig {
                endpoint: url.into(),
                model: "stub".into(),
                dim,
                token_env: "DKAP_TEST_UNSET_TOKEN".into(),
                timeout_secs: 5,
                max_retries: 0,
            })),
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn http_embedder_matches_local_provider() {
    let local = HashingEmbedder { dim: 64 };
    let stub = Stub::start(Box::new(move |_, body| {
        let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
        (200, json!({ "vectors": local.embed(&texts).unwrap(), "dim": 64 }).to_string())
    }));
    let remote = run_episode(&stream(), &dense_config(&stub.url, 64)).unwrap();
    let mut offline = EpisodeConfig::default();
    offline.retriever = RetrieverConfig {
        kind: RetrieverKind::Dense,
        embedder: Some(EmbedderConfig::Hashing { dim: 64 }),
        ..Default::default()
    };
    let local = run_episode(&stream(), &offline).unwrap();
    let keys = |o: &dkap_core::harness::EpisodeOutcome| {
        o.records.iter().map(|r| r.retrieved.entries().into_iter().map(|e| e.key).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(keys(&remote), keys(&local));
    assert_eq!(keys(&remote)[1].len(), 2);
}

#[test]
fn embedder_dimension_mismatch_is_reported() {
    let stub = Stub::start(Box::new(|_, body| {
        let n = body["texts"].as_array().unwrap().len();
        (200, json!({ "vectors": vec![vec![1.0; 8]; n], "dim": 8 }).to_string())
    }));
    let abort = run_episode(&stream(), &dense_config(&stub.url, 16)).unwrap_err();
    assert_eq!(abort.records.len(), 1, "the first step has an empty base and embeds nothing");
    assert!(matches!(
        abort.error,
        HarnessError::Retrieval { t: 2, source: RetrievalError::DimensionMismatch { expected: 16, got: 8 } }
    ));
}
