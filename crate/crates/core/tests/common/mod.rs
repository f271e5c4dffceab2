//! Mock scoring service shared by the integration tests.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use natsel::scorer::{ScoreRequest, ScoreResponse};

#[derive(Debug, Clone)]
pub enum Behavior {
    /// One token per character, each with log-prob `char_logprob(c)`.
    Ok,
    /// Answer `status` to the first `n` requests, then behave like `Ok`.
    FailThenOk { n: usize, status: u16 },
    /// Sleep before answering like `Ok`.
    Delay(Duration),
    /// One more log-prob than tokens.
    LengthMismatch,
    /// A positive log-prob.
    PositiveLogprob,
    /// 400 with a context-length body.
    Overflow { required: u64, allowed: u64 },
}

/// Log-prob the mock assigns to a character.
pub fn char_logprob(c: char) -> f64 {
    -(1.0 + (c as u32 % 7) as f64) / 10.0
}

#[derive(Default)]
pub struct Stats {
    pub requests: AtomicUsize,
    pub current: AtomicUsize,
    pub peak: AtomicUsize,
}

pub struct MockServer {
    pub url: String,
    pub stats: Arc<Stats>,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(behavior: Behavior) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let stats = Arc::new(Stats::default());
        let worker = {
            let server = Arc::clone(&server);
            let stats = Arc::clone(&stats);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let stats = Arc::clone(&stats);
                    let behavior = behavior.clone();
                    std::thread::spawn(move || handle(request, &behavior, &stats));
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}"),
            stats,
            server,
            worker: Some(worker),
        }
    }

    pub fn requests(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.stats.peak.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn handle(mut request: tiny_http::Request, behavior: &Behavior, stats: &Stats) {
    let seq = stats.requests.fetch_add(1, Ordering::SeqCst);
    let now = stats.current.fetch_add(1, Ordering::SeqCst) + 1;
    stats.peak.fetch_max(now, Ordering::SeqCst);

    let mut body = String::new();
    let _ = request.as_reader().read_to_string(&mut body);
    let (status, payload) = match serde_json::from_str::<ScoreRequest>(&body) {
        Err(e) => (
            400,
            serde_json::json!({ "error": e.to_string() }).to_string(),
        ),
        Ok(req) => respond(&req, behavior, seq),
    };

    stats.current.fetch_sub(1, Ordering::SeqCst);
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
    let _ = request.respond(
        tiny_http::Response::from_string(payload)
            .with_status_code(status)
            .with_header(header),
    );
}

fn ok_body(req: &ScoreRequest) -> String {
    let tokens: Vec<String> = req.continuation.chars().map(String::from).collect();
    let token_logprobs = req.continuation.chars().map(char_logprob).collect();
    serde_json::to_string(&ScoreResponse {
        tokens,
        token_logprobs,
    })
    .unwrap()
}

fn respond(req: &ScoreRequest, behavior: &Behavior, seq: usize) -> (u16, String) {
    match behavior {
        Behavior::Ok => (200, ok_body(req)),
        Behavior::FailThenOk { n, status } if seq < *n => {
            (*status, r#"{"error":"unavailable"}"#.into())
        }
        Behavior::FailThenOk { .. } => (200, ok_body(req)),
        Behavior::Delay(d) => {
            std::thread::sleep(*d);
            (200, ok_body(req))
        }
        Behavior::LengthMismatch => (
            200,
            r#"{"tokens":["a"],"token_logprobs":[-0.1,-0.2]}"#.into(),
        ),
        Behavior::PositiveLogprob => (200, r#"{"tokens":["a"],"token_logprobs":[0.3]}"#.into()),
        Behavior::Overflow { required, allowed } => (
            400,
            serde_json::json!({
                "error": "context too long",
                "required_tokens": required,
                "allowed_tokens": allowed,
            })
            .to_string(),
        ),
    }
}
