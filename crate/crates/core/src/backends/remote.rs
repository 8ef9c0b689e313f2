use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};

use crate::backends::protocol::{EncodeRequest, EncodeResponse, ErrorBody, ENCODE_PATH, PROTOCOL_VERSION};
use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::{normalize_vec, Embedding};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL; `/v1/rt-encode` is appended.
    pub endpoint: String,
    /// Expected embedding width. Probed with one request when `None`.
    pub dim: Option<usize>,
    pub timeout: Duration,
    /// Extra attempts after the first on transient failures.
    pub retries: u32,
    pub backoff: Duration,
    pub bearer_token: Option<String>,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            dim: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(100),
            bearer_token: None,
            max_in_flight: 8,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for a server speaking the rt-encode protocol.
///
/// Transport failures (connect, timeout, HTTP 5xx) are retried with the same
/// request bytes; protocol violations and HTTP 4xx are returned immediately.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    url: String,
    client: Client,
    dim: usize,
    gate: Gate,
    name: String,
}

impl RemoteBackend {
    pub fn connect(cfg: RemoteConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let url = format!("{}{ENCODE_PATH}", cfg.endpoint.trim_end_matches('/'));
        let mut backend = Self {
            url,
            client,
            dim: cfg.dim.unwrap_or(0),
            gate: Gate::new(cfg.max_in_flight),
            name: format!("remote:{}", cfg.endpoint),
            cfg,
        };
        if backend.cfg.dim.is_none() {
            let probe = backend.call("dimension probe", &[])?;
            backend.dim = probe.dim;
        }
        Ok(backend)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn call(&self, text: &str, prefix: &[Vec<f64>]) -> Result<EncodeResponse> {
        let request = EncodeRequest {
            version: PROTOCOL_VERSION,
            text: text.to_string(),
            prefix_vectors: prefix.to_vec(),
        };
        let body = serde_json::to_vec(&request).map_err(|e| Error::Protocol(e.to_string()))?;
        let expected = (self.dim > 0).then_some(self.dim);

        let _permit = self.gate.acquire();
        let mut delay = self.cfg.backoff;
        let mut attempt = 0;
        loop {
            match self.send_once(&body, expected) {
                Err(e) if e.is_transient() && attempt < self.cfg.retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
                other => return other,
            }
        }
    }

    fn send_once(&self, body: &[u8], expected_dim: Option<usize>) -> Result<EncodeResponse> {
        let mut req = self
            .client
            .post(&self.url)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(token) = &self.cfg.bearer_token {
            req = req.header(AUTHORIZATION, format!("Bearer {token}"));
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Error::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(Error::Transport(format!("HTTP {status}: {}", error_message(&bytes))));
        }
        if status.is_client_error() {
            return Err(Error::Client {
                status: status.as_u16(),
                message: error_message(&bytes),
            });
        }
        if !status.is_success() {
            return Err(Error::Protocol(format!("unexpected HTTP status {status}")));
        }
        let parsed: EncodeResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Protocol(format!("malformed response body: {e}")))?;
        parsed.validate(expected_dim)?;
        Ok(parsed)
    }
}

fn error_message(bytes: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(bytes)
        .map(|b| b.error)
        .unwrap_or_else(|_| String::from_utf8_lossy(bytes).into_owned())
}

impl<T: Real> EncoderBackend<T> for RemoteBackend {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        if let Some(s) = prefix_states.iter().find(|s| s.dim() != self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: s.dim(),
            });
        }
        let prefix: Vec<Vec<f64>> = prefix_states.iter().map(Embedding::to_f64_vec).collect();
        let resp = self.call(text, &prefix)?;
        normalize_vec(resp.embedding.into_iter().map(T::from_f64_lossy).collect()).map_err(|e| match e {
            Error::ZeroNorm => Error::Protocol("server returned a zero vector".into()),
            other => other,
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        &self.name
    }
}
