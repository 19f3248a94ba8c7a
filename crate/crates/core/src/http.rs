//! Blocking JSON-over-POST client shared by the remote LM and scorer.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server error: HTTP {0}")]
    Server(u16),
    #[error("response violates the contract: {0}")]
    Contract(String),
}

impl RemoteError {
    pub fn is_retriable(&self) -> bool {
        match self {
            RemoteError::Timeout | RemoteError::Transport(_) => true,
            RemoteError::Server(status) => *status >= 500,
            RemoteError::Contract(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    /// Sleep before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            retry,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// POSTs `body` and decodes the reply, retrying retriable failures.
    pub fn post<Req, Resp>(&self, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err(e) if e.is_retriable() && attempt < self.retry.max_retries => {
                    let wait = self.retry.backoff_ms.saturating_mul(1 << attempt.min(16));
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<Req, Resp>(&self, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(RemoteError::Server(status));
        }
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        serde_json::from_str(&text).map_err(|e| RemoteError::Contract(e.to_string()))
    }
}

fn map_ureq(e: ureq::Error) -> RemoteError {
    match e {
        ureq::Error::Timeout(_) => RemoteError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => RemoteError::Timeout,
        ureq::Error::StatusCode(s) => RemoteError::Server(s),
        other => RemoteError::Transport(other.to_string()),
    }
}
