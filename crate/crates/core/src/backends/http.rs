//! JSON-over-HTTP client: one `POST /v1/<capability>` endpoint per
//! capability under a base URL.
//!
//! Transport failures (connection refused, DNS, timeouts, broken streams)
//! are retried with exponential backoff. HTTP status errors and malformed
//! bodies come from the model service itself and are never retried.

use std::thread;
use std::time::Duration;

use serde_json::Value;

use super::{BackendError, Request, Transport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(250),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }
}

pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
    bearer_token: Option<String>,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build();
        HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            bearer_token: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_bearer_token(mut self, token: Option<String>) -> Self {
        self.bearer_token = token;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = &self.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).expect("request bodies serialize");
        let mut resp = req.send(&payload[..]).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Status {
                endpoint: url.to_string(),
                status,
                body: text,
            }));
        }
        serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(BackendError::Validation(format!("response from {url} is not JSON: {e}")))
        })
    }
}

enum Attempt {
    Retryable(String),
    Fatal(BackendError),
}

fn classify(err: ureq::Error) -> Attempt {
    use ureq::Error as E;
    match err {
        E::Io(_) | E::Timeout(_) | E::HostNotFound | E::ConnectionFailed | E::BodyStalled => {
            Attempt::Retryable(err.to_string())
        }
        other => Attempt::Fatal(BackendError::Validation(other.to_string())),
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        let url = format!("{}{}", self.base_url, request.capability.path());
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match self.attempt(&url, &request.body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    last = msg;
                    if attempt < self.retry.max_attempts {
                        thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(BackendError::Unreachable {
            endpoint: url,
            attempts: self.retry.max_attempts.max(1),
            message: last,
        })
    }
}
