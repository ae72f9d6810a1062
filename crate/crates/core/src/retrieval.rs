//! Knowledge documents, exact cosine top-k search and the embedding seam.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text::tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Yara,
    Advisory,
    Snippet,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Yara => "yara",
            Source::Advisory => "advisory",
            Source::Snippet => "snippet",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s {
            "yara" => Some(Source::Yara),
            "advisory" => Some(Source::Advisory),
            "snippet" => Some(Source::Snippet),
            _ => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    pub id: String,
    pub source: Source,
    pub title: String,
    pub body: String,
    pub metadata: BTreeMap<String, String>,
    /// Empty until the document is embedded.
    #[serde(default)]
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndexError {
    #[error("vector has dimension {found}, collection expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("document {0} has a non-finite embedding component")]
    NonFinite(String),
    #[error("duplicate document id {0}")]
    DuplicateId(String),
    #[error("document {0} has an empty body")]
    EmptyBody(String),
    #[error("k must be at least 1")]
    InvalidK,
}

/// One named collection with a fixed embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    name: String,
    dimension: usize,
    documents: BTreeMap<String, KnowledgeDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

impl VectorIndex {
    pub fn new(name: impl Into<String>, dimension: usize) -> Self {
        Self { name: name.into(), dimension, documents: BTreeMap::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeDocument> {
        self.documents.get(id)
    }

    /// Documents in id order.
    pub fn documents(&self) -> impl Iterator<Item = &KnowledgeDocument> {
        self.documents.values()
    }

    pub fn insert(&mut self, doc: KnowledgeDocument) -> Result<(), IndexError> {
        if doc.embedding.len() != self.dimension {
            return Err(IndexError::DimensionMismatch { expected: self.dimension, found: doc.embedding.len() });
        }
        if !doc.embedding.iter().all(|x| x.is_finite()) {
            return Err(IndexError::NonFinite(doc.id));
        }
        if doc.body.is_empty() {
            return Err(IndexError::EmptyBody(doc.id));
        }
        if self.documents.contains_key(&doc.id) {
            return Err(IndexError::DuplicateId(doc.id));
        }
        self.documents.insert(doc.id.clone(), doc);
        Ok(())
    }

    /// Exact top-`k` by cosine similarity, ties broken by ascending id.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<ScoredId>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if q.len() != self.dimension {
            return Err(IndexError::DimensionMismatch { expected: self.dimension, found: q.len() });
        }
        let mut scored: Vec<ScoredId> = self
            .documents
            .values()
            .map(|d| ScoredId { id: d.id.clone(), score: cosine(q, &d.embedding) })
            .collect();
        // BTreeMap iteration is id-ascending and the sort is stable, so
        // equal scores keep id order.
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Cosine similarity clamped to [-1, 1]; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    Empty,
    #[error("text of {len} bytes exceeds the embedding budget of {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("embedding provider error: {0}")]
    Provider(String),
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    /// Largest accepted input, in bytes.
    fn max_input(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Shared precondition check for embedders.
pub fn check_input(text: &str, max: usize) -> Result<(), EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::Empty);
    }
    if text.len() > max {
        return Err(EmbedError::TextTooLong { len: text.len(), max });
    }
    Ok(())
}

/// Offline embedder: signed feature hashing of normalized tokens into a
/// unit vector. Texts that share tokens land close together, which keeps
/// offline retrieval meaningful while staying fully deterministic.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
    pub max_input: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: 1536, seed: 0, max_input: 32 * 1024 }
    }
}

impl HashEmbedder {
    fn bucket(&self, token: &[u8], salt: u32) -> (usize, f64) {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(salt.to_le_bytes())
            .chain_update(token)
            .finalize();
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&digest[..8]);
        let i = (u64::from_le_bytes(idx) % self.dimension as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (i, sign)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_input(&self) -> usize {
        self.max_input
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        check_input(text, self.max_input)?;
        let mut v = vec![0.0; self.dimension];
        for tok in tokens(text) {
            let (i, s) = self.bucket(tok.as_bytes(), 0);
            v[i] += s;
        }
        let mut norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if norm_sq == 0.0 {
            // no tokens, or every bucket cancelled: spread the raw text
            for salt in 1..=8u32 {
                let (i, s) = self.bucket(text.as_bytes(), salt);
                v[i] += s;
            }
            norm_sq = v.iter().map(|x| x * x).sum();
            if norm_sq == 0.0 {
                let (i, _) = self.bucket(text.as_bytes(), 9);
                v[i] = 1.0;
                norm_sq = 1.0;
            }
        }
        let norm = libm::sqrt(norm_sq);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Builds an index from embedded documents.
pub fn build_index(
    name: &str,
    dimension: usize,
    docs: impl IntoIterator<Item = KnowledgeDocument>,
) -> Result<VectorIndex, IndexError> {
    let mut index = VectorIndex::new(name.to_string(), dimension);
    for d in docs {
        index.insert(d)?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn doc(id: &str, embedding: Vec<f64>) -> KnowledgeDocument {
        KnowledgeDocument {
            id: id.into(),
            source: Source::Yara,
            title: id.into(),
            body: format!("body of {id}"),
            metadata: BTreeMap::new(),
            embedding,
        }
    }

    #[test]
    fn singleton_self_query() {
        let idx = build_index("c", 3, [doc("a", vec![0.3, -0.2, 0.9])]).unwrap();
        let hits = idx.query(&[0.3, -0.2, 0.9], 4).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_documents() {
        let idx = build_index(
            "c",
            3,
            [doc("a", vec![1.0, 0.0, 0.0]), doc("b", vec![0.0, 1.0, 0.0]), doc("c", vec![0.0, 0.0, 1.0])],
        )
        .unwrap();
        let hits = idx.query(&[0.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(hits[0].id, "b");
        assert_eq!(hits[0].score, 1.0);
        assert_eq!((hits[1].id.as_str(), hits[1].score), ("a", 0.0));
        assert_eq!((hits[2].id.as_str(), hits[2].score), ("c", 0.0));
    }

    #[test]
    fn index_errors() {
        let mut idx = VectorIndex::new("c", 2);
        assert_eq!(
            idx.insert(doc("a", vec![1.0])),
            Err(IndexError::DimensionMismatch { expected: 2, found: 1 })
        );
        assert_eq!(idx.insert(doc("a", vec![f64::NAN, 0.0])), Err(IndexError::NonFinite("a".into())));
        idx.insert(doc("a", vec![1.0, 0.0])).unwrap();
        assert_eq!(idx.insert(doc("a", vec![1.0, 0.0])), Err(IndexError::DuplicateId("a".into())));
        assert_eq!(idx.query(&[1.0], 1), Err(IndexError::DimensionMismatch { expected: 2, found: 1 }));
        assert_eq!(idx.query(&[1.0, 0.0], 0), Err(IndexError::InvalidK));
    }

    #[test]
    fn hash_embedder_is_deterministic_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("subprocess popen bash").unwrap();
        let b = e.embed("subprocess popen bash").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1536);
        let norm: f64 = libm::sqrt(a.iter().map(|x| x * x).sum());
        assert!((norm - 1.0).abs() < 1e-6);
        let punct = e.embed("!!!").unwrap();
        let norm: f64 = libm::sqrt(punct.iter().map(|x| x * x).sum());
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_embedder_rejects_bad_input() {
        let e = HashEmbedder { max_input: 8, ..HashEmbedder::default() };
        assert_eq!(e.embed(""), Err(EmbedError::Empty));
        assert_eq!(e.embed("123456789"), Err(EmbedError::TextTooLong { len: 9, max: 8 }));
    }

    #[test]
    fn shared_tokens_score_higher() {
        let e = HashEmbedder::default();
        let q = e.embed("os.system curl bash payload").unwrap();
        let near = e.embed("downloads a payload with curl and pipes it to bash").unwrap();
        let far = e.embed("renders markdown tables for documentation").unwrap();
        assert!(cosine(&q, &near) > cosine(&q, &far));
    }
}
