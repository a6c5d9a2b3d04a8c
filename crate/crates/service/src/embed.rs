//! Client for an external text-embedding endpoint.
//!
//! The endpoint receives `{"texts": [...]}` and answers
//! `{"vectors": [[...], ...]}` in the same order.

use std::time::Duration;

use diffuse_core::vectors::{EmbeddingMatrix, VectorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENDPOINT_VAR: &str = "EMBED_ENDPOINT";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    Empty,
    #[error("no embedding endpoint configured (set {ENDPOINT_VAR})")]
    NoEndpoint,
    #[error("embedding endpoint answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("embedding request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("sent {sent} texts, received {received} vectors")]
    CountMismatch { sent: usize, received: usize },
    #[error("vector dimension changed from {expected} to {found}")]
    DimensionDrift { expected: usize, found: usize },
    #[error(transparent)]
    Vectors(#[from] VectorError),
}

impl EmbedError {
    fn is_transient(&self) -> bool {
        match self {
            EmbedError::Status { status, .. } => *status == 429 || *status >= 500,
            EmbedError::Transport(e) => !e.is_decode(),
            _ => false,
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct Response {
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EmbedClient {
    endpoint: String,
    pub batch_size: usize,
    pub attempts: u32,
    /// Delay before the first retry; doubled for each further one.
    pub backoff: Duration,
    pub bearer_token: Option<String>,
    http: reqwest::Client,
}

impl EmbedClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            batch_size: 64,
            attempts: 3,
            backoff: Duration::from_millis(200),
            bearer_token: None,
            http: reqwest::Client::new(),
        }
    }

    /// Client for `EMBED_ENDPOINT`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_VAR)
            .ok()
            .filter(|s| !s.is_empty())
            .map(Self::new)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn post(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut request = self.http.post(&self.endpoint).json(&Request { texts: texts.to_vec() });
        if let Some(token) = &self.bearer_token {
            request = request.bearer_auth(token);
        }
        let response = request.send().await?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(EmbedError::Status {
                status: status.as_u16(),
                body,
            });
        }
        Ok(response.json::<Response>().await?.vectors)
    }

    async fn post_with_retry(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.post(texts).await {
                Err(e) if e.is_transient() && attempt < self.attempts => {
                    log::warn!("embedding attempt {attempt} failed: {e}; retrying in {delay:?}");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Embeds `(id, text)` pairs in order, `batch_size` texts per request.
    pub async fn embed(&self, texts: &[(String, String)]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Empty);
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size.max(1)) {
            let batch: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
            let vectors = self.post_with_retry(&batch).await?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    sent: chunk.len(),
                    received: vectors.len(),
                });
            }
            let expected = rows.first().or(vectors.first()).map_or(0, Vec::len);
            if let Some(v) = vectors.iter().find(|v| v.len() != expected) {
                return Err(EmbedError::DimensionDrift {
                    expected,
                    found: v.len(),
                });
            }
            rows.extend(vectors);
        }
        let ids = texts.iter().map(|(id, _)| id.clone()).collect();
        Ok(EmbeddingMatrix::new(ids, rows)?)
    }
}
