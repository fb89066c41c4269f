//! Minimal JSON-over-HTTP POST with bounded exponential backoff.

use std::thread;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode response: {0}")]
    Decode(String),
}

impl HttpError {
    /// Transport failures and server-side errors may succeed on a later call.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Transport { .. } => true,
            HttpError::Status { status, .. } => *status >= 500,
            HttpError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(250),
        }
    }

    pub fn post_json(&self, body: &Value) -> Result<Value, HttpError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = agent.post(&self.url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let err = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| HttpError::Decode(e.to_string()));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    HttpError::Status { status, body: text }
                }
                Err(e) => HttpError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if !err.is_retryable() || attempt > self.max_retries {
                return Err(match err {
                    HttpError::Status { status, body } if status >= 500 => HttpError::Transport {
                        attempts: attempt,
                        message: format!("status {status}: {body}"),
                    },
                    other => other,
                });
            }
            tracing::warn!(url = %self.url, attempt, error = %err, "retrying request");
            thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
        }
    }
}
