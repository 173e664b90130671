//! HTTP chat-completion backend with retry, bounded concurrency and a
//! token-bucket rate limit.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{Backend, BackendError, CompletionRequest, CompletionResult, Usage};

/// Environment variable holding the API key. The key is never persisted.
pub const API_KEY_ENV: &str = "ANCHORCHAIN_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub requests_per_second: f64,
    pub burst: f64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 16_000,
            timeout_secs: 120,
            max_in_flight: 8,
            requests_per_second: 5.0,
            burst: 5.0,
            api_key: None,
        }
    }
}

impl RemoteConfig {
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    /// Delay before retry number `attempt` (1-based): doubling from the
    /// initial backoff, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore wait");
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64, capacity: f64) -> Self {
        let capacity = capacity.max(1.0);
        Self {
            rate,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    fn take(&self) {
        if self.rate.is_nan() || self.rate <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut s = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.rate;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    in_flight: Semaphore,
    bucket: TokenBucket,
}

enum Attempt {
    Done(CompletionResult),
    Retry(BackendError),
    Fail(BackendError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            in_flight: Semaphore::new(cfg.max_in_flight),
            bucket: TokenBucket::new(cfg.requests_per_second, cfg.burst),
            agent,
            cfg,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn body(req: &CompletionRequest) -> Value {
        json!({
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.decoding.temperature,
            "max_tokens": req.decoding.max_tokens,
        })
    }

    fn attempt(&self, req: &CompletionRequest) -> Attempt {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut call = self.agent.post(&url);
        if let Some(key) = &self.cfg.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut resp = match call.send_json(Self::body(req)) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::Network(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(BackendError::Network(e.to_string())),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(BackendError::Http { status, body: text });
        }
        if !(200..300).contains(&status) {
            return Attempt::Fail(BackendError::Http { status, body: text });
        }
        match parse_chat_response(&text) {
            Ok((content, usage)) => Attempt::Done(CompletionResult {
                text: content,
                usage,
                latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            }),
            Err(e) => Attempt::Fail(e),
        }
    }
}

/// Pulls the first choice's message content and token usage out of a
/// chat-completion response body.
pub(crate) fn parse_chat_response(body: &str) -> Result<(String, Usage), BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok((content.to_string(), usage))
}

impl Backend for RemoteBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let _permit = self.in_flight.acquire();
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = BackendError::Network("no attempt made".into());
        for attempt in 1..=attempts {
            self.bucket.take();
            match self.attempt(req) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("completion attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                    if attempt < attempts {
                        thread::sleep(self.cfg.backoff(attempt));
                    }
                }
            }
        }
        Err(last)
    }

    fn id(&self) -> String {
        format!("remote:{}", self.cfg.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let cfg = RemoteConfig {
            initial_backoff_ms: 100,
            max_backoff_ms: 1000,
            ..RemoteConfig::default()
        };
        assert_eq!(cfg.backoff(1), Duration::from_millis(100));
        assert_eq!(cfg.backoff(2), Duration::from_millis(200));
        assert_eq!(cfg.backoff(4), Duration::from_millis(800));
        assert_eq!(cfg.backoff(5), Duration::from_millis(1000));
        assert_eq!(cfg.backoff(70), Duration::from_millis(1000));
    }

    #[test]
    fn response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let (text, usage) = parse_chat_response(body).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage.prompt_tokens, 3);
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
    }

    #[test]
    fn api_key_not_serialized() {
        let cfg = RemoteConfig {
            api_key: Some("sk-secret".into()),
            ..RemoteConfig::default()
        };
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-secret"));
    }
}
