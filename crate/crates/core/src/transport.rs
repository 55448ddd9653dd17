//! Blocking JSON-over-HTTP request/response used by the encoder and language-model clients.

use std::time::{Duration, Instant};

use serde::{de::DeserializeOwned, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request to {endpoint} timed out after {timeout_s:.1} s")]
    Timeout { endpoint: String, timeout_s: f64 },
    #[error("request to {endpoint} failed: {message}")]
    Http { endpoint: String, message: String },
    #[error("malformed response body: {0}")]
    Decode(String),
    #[error("no recorded response for request {0}")]
    CassetteMiss(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone)]
pub struct HttpJson {
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra headers, e.g. an authorization bearer.
    pub headers: Vec<(String, String)>,
}

impl HttpJson {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            headers: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    /// POSTs `body` and decodes the JSON reply; returns the reply and the elapsed time.
    pub fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<(Resp, Duration), TransportError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.endpoint);
        for (k, v) in &self.headers {
            req = req.set(k, v);
        }
        let start = Instant::now();
        let resp = req.send_json(body).map_err(|err| self.classify(err))?;
        let parsed = resp
            .into_json::<Resp>()
            .map_err(|err| TransportError::Decode(err.to_string()))?;
        Ok((parsed, start.elapsed()))
    }

    fn classify(&self, err: ureq::Error) -> TransportError {
        match err {
            ureq::Error::Transport(t) if t.kind() == ureq::ErrorKind::Io => {
                let message = t.to_string();
                if message.contains("timed out") || message.contains("WouldBlock") {
                    TransportError::Timeout {
                        endpoint: self.endpoint.clone(),
                        timeout_s: self.timeout.as_secs_f64(),
                    }
                } else {
                    TransportError::Http {
                        endpoint: self.endpoint.clone(),
                        message,
                    }
                }
            }
            other => TransportError::Http {
                endpoint: self.endpoint.clone(),
                message: other.to_string(),
            },
        }
    }
}
