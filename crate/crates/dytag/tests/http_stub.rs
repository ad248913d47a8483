use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dytag::http::{Backoff, HttpBackend, HttpSettings};
use dytag::transcript::{load_transcript, JsonlTranscript};
use dytag_core::llm::{BackendKind, ChatMessage, Gateway, GatewayError, GenerationSettings};

/// Serves scripted (status, body) replies, one per connection; the last one repeats.
struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn stub(replies: Vec<(u16, &'static str)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let n = h.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = replies[n.min(replies.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                status,
                payload.len(),
                payload
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    Stub { url, hits, bodies }
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"1"}}]}"#;

fn backend(url: &str, attempts: u32) -> HttpBackend {
    HttpBackend::new(HttpSettings {
        endpoint: url.to_string(),
        api_key: "test-key".into(),
        max_attempts: attempts,
        backoff: Backoff { initial: Duration::from_millis(1), max: Duration::from_millis(4) },
        timeout: Duration::from_secs(5),
    })
    .unwrap()
}

#[test]
fn retries_server_errors_then_records_once() {
    let s = stub(vec![(500, "{}"), (500, "{}"), (200, OK)]);
    let b = backend(&s.url, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let sink = JsonlTranscript::open(&path).unwrap();
    let settings = GenerationSettings::default();
    let gw = Gateway::new(&b, &settings).with_transcript(&sink);
    let (resp, digest) = gw.complete(vec![ChatMessage::user("Is there an edge?")]).unwrap();
    assert_eq!(resp.content, "1");
    assert_eq!(resp.backend, BackendKind::Http);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);

    let records = load_transcript(&path).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].request_digest, digest);

    let sent: serde_json::Value = serde_json::from_str(&s.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "mock-heuristic");
    assert_eq!(sent["messages"][0]["content"], "Is there an edge?");
    assert_eq!(sent["temperature"], 0.0);
}

#[test]
fn client_error_is_not_retried() {
    let s = stub(vec![(400, r#"{"error":"bad"}"#)]);
    let err = backend(&s.url, 3).complete_once();
    assert!(matches!(err, GatewayError::Transport { attempts: 1, .. }), "{:?}", err);
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn exhausted_retries_report_attempts() {
    let s = stub(vec![(503, "{}")]);
    let err = backend(&s.url, 3).complete_once();
    assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{:?}", err);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn rate_limit_is_retried() {
    let s = stub(vec![(429, "{}"), (200, OK)]);
    let b = backend(&s.url, 2);
    let settings = GenerationSettings::default();
    let gw = Gateway::new(&b, &settings);
    assert_eq!(gw.complete(vec![ChatMessage::user("x")]).unwrap().0.content, "1");
    assert_eq!(s.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_success_body_is_fatal() {
    let s = stub(vec![(200, r#"{"choices":[]}"#)]);
    let err = backend(&s.url, 3).complete_once();
    assert!(matches!(err, GatewayError::Transport { attempts: 1, .. }), "{:?}", err);
}

#[test]
fn unreachable_endpoint_exhausts_attempts() {
    // bind then drop, so the port is closed
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let err = backend(&format!("http://{}", addr), 2).complete_once();
    assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }), "{:?}", err);
}

trait Once {
    fn complete_once(&self) -> GatewayError;
}

impl Once for HttpBackend {
    fn complete_once(&self) -> GatewayError {
        let settings = GenerationSettings::default();
        let gw = Gateway::new(self, &settings);
        gw.complete(vec![ChatMessage::user("ping")]).unwrap_err()
    }
}
