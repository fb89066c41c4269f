//! Text embedding providers.

use serde_json::{json, Value};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::http::{HttpEndpoint, HttpError};
use crate::pool;

pub const DEFAULT_STUB_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider unreachable: {0}")]
    Transport(String),
    #[error("embedding provider contract violated: {0}")]
    Contract(String),
    #[error("text `{0}` embeds to the zero vector")]
    ZeroVector(String),
    #[error("cannot embed an empty name")]
    EmptyName,
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

impl From<HttpError> for EmbedError {
    fn from(e: HttpError) -> Self {
        if e.is_retryable() {
            EmbedError::Transport(e.to_string())
        } else {
            EmbedError::Contract(e.to_string())
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Declared output dimension, if known ahead of the first call.
    fn dimension(&self) -> Option<usize>;

    /// Raw, not necessarily normalized, vectors for each text.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Deterministic signed feature-hashing embedder for offline use.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "stub dimension must be positive");
        Self { dim, seed }
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for tok in tokens(text) {
            let h = xxh64(tok.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        acc.into_iter().map(|x| x as f32).collect()
    }
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_STUB_DIM, 0)
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
}

/// Remote embedder speaking `{"texts": [..]}` → `{"vectors": [[..], ..]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: HttpEndpoint,
    dim: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(endpoint: HttpEndpoint, dim: Option<usize>) -> Self {
        Self { endpoint, dim }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> Option<usize> {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let resp = self.endpoint.post_json(&json!({ "texts": texts }))?;
        let vectors = resp
            .get("vectors")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Contract("response lacks a `vectors` array".into()))?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::Contract(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        vectors
            .iter()
            .map(|v| {
                v.as_array()
                    .ok_or_else(|| EmbedError::Contract("vector is not an array".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| EmbedError::Contract("non-numeric vector entry".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Text fed to the embedder for a graph node: name and description joined by one space.
pub fn node_text(name: &str, description: &str) -> String {
    if description.is_empty() {
        name.to_string()
    } else {
        format!("{name} {description}")
    }
}

/// L2-normalizes in double precision before narrowing back to `f32`.
pub fn normalize(v: &[f32], label: &str) -> Result<Vec<f32>, EmbedError> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector(label.to_string()));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

fn check_dims(provider: &dyn EmbeddingProvider, raw: &[Vec<f32>]) -> Result<(), EmbedError> {
    let expected = provider.dimension().or_else(|| raw.first().map(Vec::len));
    if let Some(d) = expected {
        if let Some(bad) = raw.iter().find(|v| v.len() != d) {
            return Err(EmbedError::Contract(format!(
                "expected dimension {d}, got {}",
                bad.len()
            )));
        }
    }
    Ok(())
}

/// Unit vector for a (name, description) pair.
pub fn embed(provider: &dyn EmbeddingProvider, name: &str, description: &str) -> Result<Vec<f32>, EmbedError> {
    if name.is_empty() {
        return Err(EmbedError::EmptyName);
    }
    embed_text(provider, &node_text(name, description))
}

pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f32>, EmbedError> {
    let raw = provider.embed_texts(&[text.to_string()])?;
    if raw.len() != 1 {
        return Err(EmbedError::Contract(format!("expected 1 vector, got {}", raw.len())));
    }
    check_dims(provider, &raw)?;
    normalize(&raw[0], text)
}

/// Embeds many texts in batches, with at most `fanout` batches in flight.
pub fn embed_many(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    batch: usize,
    fanout: usize,
) -> Result<Vec<Vec<f32>>, EmbedError> {
    let chunks: Vec<&[String]> = texts.chunks(batch.max(1)).collect();
    let results = pool::map_bounded(&chunks, fanout, |chunk| -> Result<Vec<Vec<f32>>, EmbedError> {
        let raw = provider.embed_texts(chunk)?;
        if raw.len() != chunk.len() {
            return Err(EmbedError::Contract(format!(
                "asked for {} vectors, got {}",
                chunk.len(),
                raw.len()
            )));
        }
        check_dims(provider, &raw)?;
        raw.iter().zip(chunk.iter()).map(|(v, t)| normalize(v, t)).collect()
    });
    let mut out = Vec::with_capacity(texts.len());
    let mut dim = None;
    for r in results {
        for v in r? {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(EmbedError::Contract("dimension changed between batches".into()))
                }
                _ => {}
            }
            out.push(v);
        }
    }
    Ok(out)
}
