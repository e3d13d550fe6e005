use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RetrievalError;
use crate::llm::{LlmError, RetryPolicy};

/// Dense embedding; all values finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::Dimension {
                expected: 1,
                found: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    debug_assert_eq!(a.dimension(), b.dimension());
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub trait EmbeddingBackend: Send + Sync {
    /// One vector per text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, RetrievalError>;

    /// Identifies the model and settings; indexes refuse queries across fingerprints.
    fn fingerprint(&self) -> String;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut v = self.embed(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| RetrievalError::Backend("no vector returned".into()))
    }
}

/// Offline backend: hashed bag of lowercase tokens weighted by term count.
#[derive(Debug, Clone)]
pub struct HashedBagBackend {
    dimension: usize,
}

impl HashedBagBackend {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn bucket(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(word) % self.dimension as u64) as usize
    }

    fn vectorize(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut v = vec![0f32; self.dimension];
        let mut any = false;
        for tok in text.split_whitespace() {
            v[self.bucket(&tok.to_lowercase())] += 1.0;
            any = true;
        }
        if !any {
            return Err(RetrievalError::EmptyText);
        }
        EmbeddingVector::new(v)
    }
}

impl Default for HashedBagBackend {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingBackend for HashedBagBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        if texts.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        texts.iter().map(|t| self.vectorize(t)).collect()
    }

    fn fingerprint(&self) -> String {
        format!("hashed-bag/sha256/{}", self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbeddingConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

/// Hosted embedding service speaking the common `{model, input}` →
/// `{data: [{index, embedding}]}` protocol.
pub struct HttpEmbeddingBackend {
    config: HttpEmbeddingConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingBackend {
    pub fn new(config: HttpEmbeddingConfig) -> Result<Self, RetrievalError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                RetrievalError::Backend(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.retry.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    fn send(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, LlmError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbeddingRequest {
                model: &self.config.model,
                input: batch,
            })
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body });
        }
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&body).map_err(|e| LlmError::Malformed(e.to_string()))?;
        if parsed.data.len() != batch.len() {
            return Err(LlmError::Malformed(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            let vectors = self
                .config
                .retry
                .run(|| self.send(batch))
                .map_err(|e| RetrievalError::Backend(e.to_string()))?;
            for v in vectors {
                out.push(EmbeddingVector::new(v)?);
            }
        }
        if let Some(first) = out.first() {
            let dim = first.dimension();
            if let Some(bad) = out.iter().find(|v| v.dimension() != dim) {
                return Err(RetrievalError::Dimension {
                    expected: dim,
                    found: bad.dimension(),
                });
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        format!("http/{}", self.config.model)
    }
}
