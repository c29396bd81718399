//! Minimal blocking JSON-over-HTTP client shared by the embedding and LLM
//! provider backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HttpError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode provider response: {0}")]
    Decode(String),
}

impl HttpError {
    /// Transport failures, rate limits and server errors may succeed later.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Transport { .. } => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    pub endpoint: String,
    pub auth_token: Option<String>,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl JsonClient {
    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            auth_token,
            max_retries: 2,
            backoff: Duration::from_millis(200),
        }
    }

    /// Reads the bearer token from an environment variable, if set.
    pub fn token_from_env(var: &str) -> Option<String> {
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    /// POSTs `body` and decodes the JSON reply. Retryable failures are retried
    /// up to `max_retries` times. Returns the decoded reply with its raw text.
    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<(Resp, String), HttpError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(body, attempt) {
                Err(e) if e.is_retryable() && attempt <= self.max_retries => {
                    tracing::warn!(endpoint = %self.endpoint, attempt, error = %e, "retrying provider call");
                    std::thread::sleep(self.backoff * attempt);
                }
                other => return other,
            }
        }
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
        attempt: u32,
    ) -> Result<(Resp, String), HttpError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| HttpError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| HttpError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(HttpError::Status { status, body: text });
        }
        let parsed = serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))?;
        Ok((parsed, text))
    }
}
