use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use anchorchain_core::agent::{
    Backend, BackendError, CachedBackend, CompletionRequest, Decoding, RemoteBackend, RemoteConfig, RoleTag,
};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves the given (status, body) replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or("").to_string(),
                authorization,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 2}
    })
    .to_string()
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url.to_string(),
        max_attempts: 3,
        initial_backoff_ms: 1,
        max_backoff_ms: 2,
        timeout_secs: 10,
        requests_per_second: 0.0,
        api_key: Some("sk-test-secret".into()),
        ..RemoteConfig::default()
    }
}

fn request(user: &str) -> CompletionRequest {
    CompletionRequest::new(
        RoleTag::Writer,
        "writer",
        "system text".into(),
        user.into(),
        "test-model",
        Decoding::default(),
    )
}

#[test]
fn retries_rate_limit_then_succeeds() {
    let (url, seen, handle) = stub(vec![
        (429, "{\"error\": \"slow down\"}".into()),
        (503, "unavailable".into()),
        (200, ok_body("Reed")),
    ]);
    let backend = RemoteBackend::new(config(&url));
    let out = backend.complete(&request("Question: who?")).unwrap();
    handle.join().unwrap();
    assert_eq!(out.text, "Reed");
    assert_eq!(out.usage.prompt_tokens, 11);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test-secret"));
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["messages"][1]["content"], "Question: who?");
    assert_eq!(seen[0].body["temperature"], 0.0);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen, handle) = stub(vec![(400, "{\"error\": \"bad\"}".into())]);
    let err = RemoteBackend::new(config(&url)).complete(&request("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Http { status: 400, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, _, handle) = stub(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let err = RemoteBackend::new(config(&url)).complete(&request("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Http { status: 500, .. }));
}

#[test]
fn malformed_success_body_is_reported() {
    let (url, _, handle) = stub(vec![(200, "{\"choices\": []}".into())]);
    let err = RemoteBackend::new(config(&url)).complete(&request("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::BadResponse(_)));
}

#[test]
fn disk_cache_serves_repeats_without_the_key() {
    let (url, seen, handle) = stub(vec![(200, ok_body("cached answer"))]);
    let dir = tempfile::tempdir().unwrap();
    let cached = CachedBackend::on_disk(RemoteBackend::new(config(&url)), dir.path()).unwrap();
    let first = cached.complete(&request("same")).unwrap();
    handle.join().unwrap();
    let second = cached.complete(&request("same")).unwrap();
    assert_eq!(first.text, second.text);
    assert_eq!(cached.upstream_calls(), 1);
    assert_eq!(seen.lock().unwrap().len(), 1);

    // A fresh cache over the same directory needs no server at all.
    let offline = CachedBackend::on_disk(RemoteBackend::new(config("http://127.0.0.1:9")), dir.path()).unwrap();
    assert_eq!(offline.complete(&request("same")).unwrap().text, "cached answer");
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains("sk-test-secret"));
    }
}
