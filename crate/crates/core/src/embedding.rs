//! Text embedders. Every implementation maps text to a 384-dimensional
//! vector and must be deterministic.

use std::fmt;
use std::ops::Deref;

use thiserror::Error;

pub const EMBEDDING_DIM: usize = 384;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("expected {EMBEDDING_DIM} values, got {0}")]
    Dimension(usize),
    #[error("embedding contains a non-finite value at {0}")]
    NonFinite(usize),
    #[error("remote embedder: {0}")]
    Remote(String),
    #[error("unknown embedder `{0}`")]
    Unknown(String),
}

#[derive(Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.len() != EMBEDDING_DIM {
            return Err(EmbeddingError::Dimension(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &EmbeddingVector) -> f64 {
        euclidean(&self.0, &other.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EmbeddingVector(|v|={:.6}, {:?}..)",
            self.norm(),
            &self.0[..4]
        )
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Contract shared by all embedders.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_all(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Feature-hashing embedder over lowercase alphanumeric tokens and adjacent
/// token pairs. Token pairs make the vector depend on token order.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

const BIGRAM_WEIGHT: f64 = 0.5;

fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashEmbedder {
    fn accumulate(values: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % EMBEDDING_DIM as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign * weight;
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let toks = tokens(text);
        let mut values = vec![0.0; EMBEDDING_DIM];
        for t in &toks {
            Self::accumulate(&mut values, t, 1.0);
        }
        for pair in toks.windows(2) {
            Self::accumulate(
                &mut values,
                &format!("{}\u{1f}{}", pair[0], pair[1]),
                BIGRAM_WEIGHT,
            );
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values)
    }
}

/// Sentence embedder served over HTTP: POST the text, receive a JSON array of
/// 384 numbers.
#[cfg(feature = "remote")]
pub struct RemoteEmbedder {
    endpoint: String,
    agent: ureq::Agent,
}

#[cfg(feature = "remote")]
impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: std::time::Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }
}

#[cfg(feature = "remote")]
impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let values: Vec<f64> = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "text/plain; charset=utf-8")
            .send(text)
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        EmbeddingVector::new(values)
    }
}

/// Selects an embedder by configuration name (`hash` or `remote`).
pub fn embedder_by_name(
    name: &str,
    endpoint: Option<&str>,
) -> Result<Box<dyn Embedder>, EmbeddingError> {
    match name {
        "hash" => Ok(Box::new(HashEmbedder)),
        #[cfg(feature = "remote")]
        "remote" => {
            let endpoint =
                endpoint.ok_or_else(|| EmbeddingError::Remote("no endpoint configured".into()))?;
            Ok(Box::new(RemoteEmbedder::new(
                endpoint,
                std::time::Duration::from_secs(5),
            )))
        }
        other => {
            let _ = endpoint;
            Err(EmbeddingError::Unknown(other.to_string()))
        }
    }
}
