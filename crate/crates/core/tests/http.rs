//! Chat client and pipeline against a local HTTP server. No external network.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use catrobust::llm::{ChatClient, ChatConfig, HttpChatClient, LlmError, RetryPolicy};
use catrobust::pipeline::{load_report, run_pipeline, RunConfig};

/// One received request: lowercased header lines and the body.
#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: String,
}

type Responder = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        headers.push(line.to_lowercase());
    }
    let len = headers
        .iter()
        .find_map(|h| h.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

/// Serves forever on an ephemeral port; returns the endpoint and the log.
fn serve(respond: Arc<Responder>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log: Arc<Mutex<Vec<Seen>>> = Arc::default();
    let log2 = log.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (respond, log) = (respond.clone(), log2.clone());
            std::thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else {
                    return;
                };
                let n = {
                    let mut l = log.lock().unwrap();
                    l.push(req.clone());
                    l.len() - 1
                };
                let (status, body) = respond(n, &req);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    (format!("http://{addr}/v1/chat/completions"), log)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
        .to_string()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        initial_backoff_ms: 1,
        max_backoff_ms: 2,
        timeout_secs: 10,
        ..RetryPolicy::default()
    }
}

fn config(endpoint: &str, key_env: Option<&str>) -> ChatConfig {
    ChatConfig {
        endpoint: endpoint.to_string(),
        model: "test-model".into(),
        temperature: 0.0,
        api_key_env: key_env.map(String::from),
        retry: fast_retry(),
        rate_limit: 0.0,
    }
}

#[test]
fn retries_server_errors_and_sends_bearer_token() {
    let (endpoint, log) = serve(Arc::new(|n, _| {
        if n == 0 {
            (500, "{}".into())
        } else {
            (200, completion("Tablets"))
        }
    }));
    std::env::set_var("CATROBUST_HTTP_TEST_KEY_A", "sekrit-a");
    let client = HttpChatClient::new(config(&endpoint, Some("CATROBUST_HTTP_TEST_KEY_A"))).unwrap();
    assert_eq!(client.complete("classify this").unwrap(), "Tablets");

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 2);
    assert!(log[1]
        .headers
        .iter()
        .any(|h| h == "authorization: bearer sekrit-a"));
    let body: serde_json::Value = serde_json::from_str(&log[1].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["content"], "classify this");
}

#[test]
fn persistent_rate_limiting_exhausts_retries() {
    let (endpoint, log) = serve(Arc::new(|_, _| (429, "slow down".into())));
    let client = HttpChatClient::new(config(&endpoint, None)).unwrap();
    match client.complete("x") {
        Err(LlmError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, log) = serve(Arc::new(|_, _| (400, "bad request".into())));
    let client = HttpChatClient::new(config(&endpoint, None)).unwrap();
    assert!(matches!(
        client.complete("x"),
        Err(LlmError::Status { status: 400, .. })
    ));
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn missing_key_variable_is_reported() {
    let err = HttpChatClient::new(config(
        "http://127.0.0.1:9/",
        Some("CATROBUST_HTTP_TEST_UNSET"),
    ))
    .err()
    .unwrap();
    assert!(matches!(err, LlmError::MissingKey(ref v) if v == "CATROBUST_HTTP_TEST_UNSET"));
}

/// Answers with the gold leaf of whichever synthetic record the prompt names.
fn gold_by_prompt(_: usize, req: &Seen) -> (u16, String) {
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    let prompt = body["messages"][0]["content"].as_str().unwrap().to_string();
    let product = prompt
        .split("\n\n")
        .find_map(|s| s.strip_prefix("Product: "))
        .unwrap()
        .to_lowercase();
    let leaf = common::records("p", 100)
        .into_iter()
        .find(|r| r.description.to_lowercase() == product)
        .map(|r| r.leaf_label)
        .unwrap_or_else(|| "Paper".into());
    (200, completion(&leaf))
}

#[test]
fn pipeline_over_http_keeps_the_key_out_of_artifacts() {
    let (endpoint, log) = serve(Arc::new(gold_by_prompt));
    std::env::set_var("CATROBUST_HTTP_TEST_KEY_B", "sekrit-b-123");
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(dir.path());
    let toml = common::config_toml(
        "out",
        &[("remote", "flat", "clean", false)],
        &format!(
            "[backends.remote]\nkind = \"chat\"\nendpoint = \"{endpoint}\"\nmodel = \"m\"\napi_key_env = \"CATROBUST_HTTP_TEST_KEY_B\"\ncompletion_suffix = true\n\n[backends.remote.retry]\ninitial_backoff_ms = 1\n"
        ),
    );
    std::fs::write(dir.path().join("run.toml"), toml).unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
    run_pipeline(&cfg).unwrap();

    let seen = log.lock().unwrap();
    assert_eq!(seen.len(), 100);
    let first: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert!(first["messages"][0]["content"]
        .as_str()
        .unwrap()
        .ends_with("Product class from the list above is:"));

    let out = dir.path().join("out");
    let report = load_report(&out).unwrap();
    assert_eq!(report.blocks[0].rows[0].values[4], 1.0);
    for f in common::files_under(&out) {
        let text = std::fs::read_to_string(out.join(&f)).unwrap();
        assert!(!text.contains("sekrit-b-123"), "{f} leaks the key");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("CATROBUST_HTTP_TEST_KEY_B"));
}
