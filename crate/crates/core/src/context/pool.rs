use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub domain: String,
    pub text: String,
}

/// Candidate initial instructions, kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPool {
    entries: Vec<PoolEntry>,
}

impl ContextPool {
    pub fn new(mut entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("context pool is empty"));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if e.text.trim().is_empty() {
                return Err(Error::invalid(format!("pool entry {:?} has empty text", e.id)));
            }
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(ContextPool { entries })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PoolEntry> {
        self.index_of(id).map(|i| &self.entries[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.id.as_str().cmp(id)).ok()
    }

    pub fn texts(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.text.clone()).collect()
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.domain.as_str()).collect()
    }

    /// Canonical serialization: sorted by id, 2-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("pool entries always serialize");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let entries: Vec<PoolEntry> = serde_json::from_str(s).map_err(|e| Error::Malformed {
            what: "pool file".into(),
            reason: e.to_string(),
        })?;
        ContextPool::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ContextPool::from_json_str(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_canonical_json()).map_err(|e| Error::io(path, e))
    }

    pub fn embed(&self, provider: &dyn EmbeddingProvider) -> Result<PoolEmbeddings> {
        let mut tokens = Vec::with_capacity(self.len());
        let mut sentences = Vec::with_capacity(self.len());
        for e in &self.entries {
            tokens.push(provider.embed_tokens(&e.text)?);
            sentences.push(provider.embed_sentence(&e.text)?);
        }
        Ok(PoolEmbeddings { tokens, sentences })
    }
}

/// Cached embeddings of a pool, index-aligned with [`ContextPool::entries`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEmbeddings {
    pub tokens: Vec<Matrix>,
    pub sentences: Vec<Vector>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> PoolEntry {
        PoolEntry {
            id: id.into(),
            domain: "science".into(),
            text: format!("text for {id}"),
        }
    }

    #[test]
    fn round_trip_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        let pool = ContextPool::new(vec![entry("b"), entry("a"), entry("c")]).unwrap();
        pool.save(&path).unwrap();
        let back = ContextPool::load(&path).unwrap();
        assert_eq!(back, pool);
        let bytes = std::fs::read_to_string(&path).unwrap();
        assert_eq!(bytes, back.to_canonical_json());
        assert!(bytes.ends_with("]\n"));
        assert!(bytes.contains("\n  {\n    \"id\": \"a\""));
        assert_eq!(pool.index_of("b"), Some(1));
    }

    #[test]
    fn duplicate_id_is_named() {
        let json = r#"[{"id":"x","domain":"d","text":"t"},{"id":"y","domain":"d","text":"t"},{"id":"x","domain":"d","text":"u"}]"#;
        let err = ContextPool::from_json_str(json).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "x"));
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(matches!(ContextPool::from_json_str("{not json"), Err(Error::Malformed { .. })));
        assert!(ContextPool::from_json_str("[]").is_err());
    }
}
