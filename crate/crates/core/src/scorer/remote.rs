//! HTTP client for a remote log-likelihood service.
//!
//! Wire protocol:
//!
//! ```text
//! POST {endpoint}/v1/score
//! request:  {"model": str, "context": str, "continuation": str}
//! 200:      {"tokens": [str], "token_logprobs": [float]}
//! error:    {"error": str}
//! ```
//!
//! The server tokenizes `context + continuation` jointly and returns the
//! log-probabilities (nats) of the continuation tokens only. A 4xx error body
//! may carry `required_tokens` and `allowed_tokens` to report a context
//! overflow.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ScoreError, Scorer, TokenScores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
    pub max_delay_ms: u64,
    /// Per-request timeout.
    pub timeout_ms: u64,
    /// Upper bound on concurrent requests from one scorer.
    pub max_in_flight: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 200,
            backoff_factor: 2.0,
            max_delay_ms: 30_000,
            timeout_ms: 120_000,
            max_in_flight: 8,
        }
    }
}

impl TransportConfig {
    /// Upper end of the jitter range before retry number `retry` (0-based).
    pub fn backoff_cap(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.backoff_factor.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_delay_ms as f64) as u64)
    }

    /// Full jitter: uniform in `[0, cap]`.
    fn backoff_delay(&self, retry: u32) -> Duration {
        let cap = self.backoff_cap(retry).as_millis() as u64;
        Duration::from_millis(rand::rng().random_range(0..=cap))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub transport: TransportConfig,
}

impl RemoteConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let url = reqwest::Url::parse(&self.endpoint).map_err(|e| {
            ScoreError::Config(format!("invalid endpoint {:?}: {e}", self.endpoint))
        })?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(ScoreError::Config(format!(
                "endpoint scheme must be http or https, got {}",
                url.scheme()
            )));
        }
        if self.model.is_empty() {
            return Err(ScoreError::Config("model name must be non-empty".into()));
        }
        let t = &self.transport;
        if t.max_attempts == 0 {
            return Err(ScoreError::Config("max_attempts must be at least 1".into()));
        }
        if t.max_in_flight == 0 {
            return Err(ScoreError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if t.backoff_factor.is_nan() || t.backoff_factor < 1.0 {
            return Err(ScoreError::Config(
                "backoff_factor must be at least 1".into(),
            ));
        }
        if t.timeout_ms == 0 {
            return Err(ScoreError::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn score_url(&self) -> String {
        format!("{}/v1/score", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

impl ScoreResponse {
    pub fn into_token_scores(self) -> Result<TokenScores, ScoreError> {
        if self.tokens.len() != self.token_logprobs.len() {
            return Err(ScoreError::Protocol(format!(
                "{} tokens but {} log-probabilities",
                self.tokens.len(),
                self.token_logprobs.len()
            )));
        }
        TokenScores::new(self.token_logprobs)
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
    required_tokens: Option<u64>,
    allowed_tokens: Option<u64>,
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct InFlightGate {
    cap: usize,
    active: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            active: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.cap {
            active = self
                .released
                .wait(active)
                .unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.released.notify_one();
    }
}

enum Attempt {
    Done(Result<TokenScores, ScoreError>),
    Retry(String),
}

/// Blocking client for the scoring service. Safe to share across threads;
/// at most `max_in_flight` requests are outstanding at once.
#[derive(Debug)]
pub struct RemoteScorer {
    config: RemoteConfig,
    scorer_id: String,
    url: String,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig, scorer_id: String) -> Result<Self, ScoreError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.transport.timeout_ms))
            .build()
            .map_err(|e| ScoreError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            url: config.score_url(),
            gate: InFlightGate::new(config.transport.max_in_flight),
            config,
            scorer_id,
            client,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, request: &ScoreRequest) -> Attempt {
        let _permit = self.gate.acquire();
        let response = match self.client.post(&self.url).json(request).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("request failed: {e}")),
        };
        let status = response.status();
        let body = match response.bytes() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(format!("reading response body failed: {e}")),
        };
        if status.is_success() {
            let parsed = serde_json::from_slice::<ScoreResponse>(&body)
                .map_err(|e| ScoreError::Protocol(format!("malformed response body: {e}")))
                .and_then(ScoreResponse::into_token_scores);
            return Attempt::Done(parsed);
        }
        if status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if status.is_client_error() {
            let err = match serde_json::from_slice::<ErrorBody>(&body) {
                Ok(ErrorBody {
                    required_tokens: Some(required),
                    allowed_tokens: Some(allowed),
                    ..
                }) => ScoreError::ContextOverflow { required, allowed },
                Ok(body) => ScoreError::Rejected {
                    status: status.as_u16(),
                    message: body.error,
                },
                Err(_) => ScoreError::Rejected {
                    status: status.as_u16(),
                    message: String::from_utf8_lossy(&body).into_owned(),
                },
            };
            return Attempt::Done(Err(err));
        }
        Attempt::Done(Err(ScoreError::Protocol(format!(
            "unexpected HTTP {status}"
        ))))
    }
}

impl Scorer for RemoteScorer {
    fn scorer_id(&self) -> &str {
        &self.scorer_id
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError> {
        if continuation.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        let request = ScoreRequest {
            model: self.config.model.clone(),
            context: context.to_string(),
            continuation: continuation.to_string(),
        };
        let transport = &self.config.transport;
        let mut last = String::new();
        for attempt in 0..transport.max_attempts {
            if attempt > 0 {
                let delay = transport.backoff_delay(attempt - 1);
                log::debug!("retrying {} in {:?} after: {last}", self.url, delay);
                std::thread::sleep(delay);
            }
            match self.attempt(&request) {
                Attempt::Done(result) => return result,
                Attempt::Retry(reason) => last = reason,
            }
        }
        Err(ScoreError::Exhausted {
            attempts: transport.max_attempts,
            last,
        })
    }
}
