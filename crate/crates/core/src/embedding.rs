//! Text embedding providers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{tokenize, TokenKind};

pub const HASHING_DIMENSION: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("embedding provider failed: {0}")]
pub struct EmbeddingError(pub String);

/// Maps text to a fixed-dimension vector, deterministically within a session.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn name(&self) -> &str {
        "embedder"
    }

    fn is_reachable(&self) -> bool {
        true
    }
}

/// Signed feature hashing of lowercased non-whitespace tokens, L2-normalized.
///
/// Text without tokens embeds to the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dimension: HASHING_DIMENSION,
        }
    }
}

impl HashingEmbedder {
    pub fn with_dimension(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

// FNV-1a, 64-bit: stable across platforms and releases, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = vec![0.0; self.dimension];
        for t in tokenize(text).tokens() {
            if t.kind == TokenKind::Whitespace {
                continue;
            }
            let h = fnv1a(t.surface.to_lowercase().as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dimension as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn name(&self) -> &str {
        "hashing"
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Embedder behind an HTTP endpoint speaking `{text}` → `{embedding: [..]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    auth_token: Option<String>,
    dimension: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    /// `dimension` is checked on every response.
    pub fn new(
        endpoint: impl Into<String>,
        auth_token: Option<String>,
        dimension: usize,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            auth_token,
            dimension,
            agent,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(auth) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {auth}"));
        }
        let body: EmbedResponse = req
            .send_json(EmbedRequest { text })
            .map_err(|e| EmbeddingError(format!("{}: {e}", self.endpoint)))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError(format!("{}: bad response: {e}", self.endpoint)))?;
        if body.embedding.len() != self.dimension {
            return Err(EmbeddingError(format!(
                "{}: expected dimension {}, got {}",
                self.endpoint,
                self.dimension,
                body.embedding.len()
            )));
        }
        if body.embedding.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError(format!("{}: non-finite embedding", self.endpoint)));
        }
        Ok(body.embedding)
    }

    fn name(&self) -> &str {
        "remote"
    }

    fn is_reachable(&self) -> bool {
        self.embed("ping").is_ok()
    }
}
