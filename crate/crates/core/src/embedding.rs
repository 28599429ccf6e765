//! Deterministic text embeddings.
//!
//! Each token maps to a seeded Rademacher vector scaled to unit length, so
//! distinct tokens are nearly orthogonal. A text becomes `n_tokens` columns by
//! truncating or cyclically repeating its tokens; repeating keeps every key
//! column informative where zero padding would not.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config;
use crate::error::{Error, Result};
use crate::http::Transport;
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub d_model: usize,
    pub n_tokens: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            d_model: config::D_MODEL,
            n_tokens: config::N_TOKENS,
            seed: 0,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_tokens == 0 {
            return Err(Error::invalid(format!("embedder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn spec(&self) -> EmbedderSpec;

    /// `d_model x n_tokens` matrix with unit-norm columns.
    fn embed_tokens(&self, text: &str) -> Result<Matrix>;

    /// Unit-norm sentence vector.
    fn embed_sentence(&self, text: &str) -> Result<Vector>;
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Feature-hash embedder; needs no model files or network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HashEmbedder {
    spec: EmbedderSpec,
}

impl HashEmbedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(HashEmbedder { spec })
    }

    /// Unit vector of a single (already normalized) token.
    pub fn token_vector(&self, token: &str) -> Vector {
        let d = self.spec.d_model;
        let mut state = fnv1a(token.as_bytes()) ^ self.spec.seed.rotate_left(17);
        let value = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(d);
        let mut bits = 0u64;
        for i in 0..d {
            if i % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            out.push(if bits >> (i % 64) & 1 == 1 { value } else { -value });
        }
        Vector::new(out)
    }

    fn tokens_checked(text: &str) -> Result<Vec<String>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        Ok(tokens)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    fn embed_tokens(&self, text: &str) -> Result<Matrix> {
        let tokens = Self::tokens_checked(text)?;
        let columns: Vec<Vector> = (0..self.spec.n_tokens)
            .map(|k| self.token_vector(&tokens[k % tokens.len()]))
            .collect();
        Matrix::from_columns(&columns)
    }

    /// Mean over all tokens of the text (no truncation), renormalized.
    /// Summation runs in sorted token order so token order never matters.
    fn embed_sentence(&self, text: &str) -> Result<Vector> {
        let mut tokens = Self::tokens_checked(text)?;
        tokens.sort();
        let mut sum = vec![0.0; self.spec.d_model];
        for t in &tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(t).as_slice()) {
                *s += v;
            }
        }
        let mean = Vector::new(sum).scale(1.0 / tokens.len() as f64);
        Ok(mean.normalized().unwrap_or_else(|| self.token_vector(&tokens[0])))
    }
}

/// Embeddings from a remote `{model, input}` endpoint, truncated or
/// zero-extended to `d_model` and renormalized.
pub struct RemoteEmbedder {
    spec: EmbedderSpec,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    transport: Arc<dyn Transport>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(
        spec: EmbedderSpec,
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        transport: Arc<dyn Transport>,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(RemoteEmbedder {
            spec,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(30),
            transport,
        })
    }

    fn fetch(&self, inputs: &[String]) -> Result<Vec<Vector>> {
        let body = json!({ "model": self.model, "input": inputs });
        let resp = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &body, self.timeout)
            .map_err(|e| Error::Malformed {
                what: "embeddings request".into(),
                reason: e.to_string(),
            })?;
        if !resp.is_success() {
            return Err(Error::Malformed {
                what: "embeddings response".into(),
                reason: format!("status {}", resp.status),
            });
        }
        let parsed: EmbeddingsResponse = serde_json::from_str(&resp.body)?;
        if parsed.data.len() != inputs.len() {
            return Err(Error::dims("embeddings response", inputs.len(), parsed.data.len()));
        }
        parsed
            .data
            .into_iter()
            .map(|item| {
                let mut v = item.embedding;
                v.resize(self.spec.d_model, 0.0);
                Vector::new(v)
                    .normalized()
                    .ok_or_else(|| Error::invalid("remote embedding is all zeros"))
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    fn embed_tokens(&self, text: &str) -> Result<Matrix> {
        let tokens = HashEmbedder::tokens_checked(text)?;
        let inputs: Vec<String> = (0..self.spec.n_tokens).map(|k| tokens[k % tokens.len()].clone()).collect();
        Matrix::from_columns(&self.fetch(&inputs)?)
    }

    fn embed_sentence(&self, text: &str) -> Result<Vector> {
        HashEmbedder::tokens_checked(text)?;
        Ok(self.fetch(&[text.to_string()])?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Top-`k` of `vectors` by descending cosine to `query`; ties go to the lower index.
pub fn rank_by_cosine(query: &Vector, vectors: &[Vector], k: usize) -> Result<Vec<Ranked>> {
    if vectors.is_empty() {
        return Err(Error::invalid("no candidates to rank"));
    }
    if k > vectors.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} candidates", vectors.len())));
    }
    let mut ranked: Vec<Ranked> = vectors
        .iter()
        .enumerate()
        .map(|(index, v)| Ranked {
            index,
            score: query.cosine(v),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Ranks candidate texts by cosine similarity of their sentence embeddings to `query`.
pub fn nearest_texts(provider: &dyn EmbeddingProvider, query: &Vector, candidates: &[String], k: usize) -> Result<Vec<Ranked>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to rank"));
    }
    let vectors = candidates
        .iter()
        .map(|c| provider.embed_sentence(c))
        .collect::<Result<Vec<_>>>()?;
    rank_by_cosine(query, &vectors, k)
}
