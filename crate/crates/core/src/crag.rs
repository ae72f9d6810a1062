//! Corrective retrieval: retrieve top-k per collection, grade every
//! candidate for relevance and admit only those at or above a threshold.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatMessage, ChatModel};
use crate::retrieval::{Embedder, Source, VectorIndex};
use crate::text::token_set;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// What the retrieval query is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// The leading bytes of the source under analysis.
    #[default]
    #[serde(alias = "raw-code")]
    RawCode,
    /// The rendered feature description of the source.
    #[serde(alias = "ast-description")]
    AstDescription,
}

impl ContextMode {
    pub fn parse(s: &str) -> Option<ContextMode> {
        match s {
            "raw_code" | "raw-code" => Some(ContextMode::RawCode),
            "ast_description" | "ast-description" => Some(ContextMode::AstDescription),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub mode: ContextMode,
    pub query_text: String,
    pub package: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedDocument {
    pub collection: String,
    pub id: String,
    pub source: Source,
    pub cosine: f64,
    pub relevance: f64,
    pub admitted: bool,
    /// Grading failure, if any; such documents are never admitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraderError {
    #[error("grader transport failure: {0}")]
    Transport(String),
    #[error("grader response has no score in 0-100: {0:?}")]
    Unparseable(String),
    #[error("grader returned a non-finite relevance")]
    NonFinite,
}

pub trait Grader: Send + Sync {
    /// Relevance of `body` to `query`; nominally in [0, 1].
    fn grade(&self, query: &str, body: &str) -> Result<f64, GraderError>;
}

/// Share of distinct query tokens that also occur in the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapGrader;

impl Grader for OverlapGrader {
    fn grade(&self, query: &str, body: &str) -> Result<f64, GraderError> {
        let q = token_set(query);
        if q.is_empty() {
            return Ok(0.0);
        }
        let b = token_set(body);
        Ok(q.intersection(&b).count() as f64 / q.len() as f64)
    }
}

/// Grades every document as fully relevant; turns corrective retrieval into
/// plain top-k retrieval.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl Grader for AcceptAll {
    fn grade(&self, _: &str, _: &str) -> Result<f64, GraderError> {
        Ok(1.0)
    }
}

const GRADING_INSTRUCTION: &str = "You are a retrieval evaluator for malware analysis. Rate how relevant the document is for deciding whether the code under analysis is malicious. Reply with a single integer from 0 to 100, where 100 means highly relevant.";

/// Asks a chat model for a 0-100 relevance score and divides by 100.
pub struct LlmGrader<'a> {
    pub model: &'a dyn ChatModel,
}

impl LlmGrader<'_> {
    pub fn messages(query: &str, body: &str) -> [ChatMessage; 2] {
        [
            ChatMessage::developer(GRADING_INSTRUCTION),
            ChatMessage::user(format!("Code under analysis:\n{query}\n\nRetrieved document:\n{body}")),
        ]
    }
}

/// First integer in `text`, when it lies in 0..=100.
pub fn parse_grade(text: &str) -> Option<u8> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits = &text[start..];
    let end = digits.find(|c: char| !c.is_ascii_digit()).unwrap_or(digits.len());
    digits[..end].parse::<u32>().ok().filter(|v| *v <= 100).map(|v| v as u8)
}

impl Grader for LlmGrader<'_> {
    fn grade(&self, query: &str, body: &str) -> Result<f64, GraderError> {
        let reply = self
            .model
            .chat(&Self::messages(query, body))
            .map_err(|e| GraderError::Transport(e.to_string()))?;
        parse_grade(&reply).map(|v| f64::from(v) / 100.0).ok_or(GraderError::Unparseable(reply))
    }
}

/// Grader output clamped to [0, 1].
pub fn grade_relevance(ctx: &RetrievalContext, body: &str, grader: &dyn Grader) -> Result<f64, GraderError> {
    let g = grader.grade(&ctx.query_text, body)?;
    if !g.is_finite() {
        return Err(GraderError::NonFinite);
    }
    Ok(g.clamp(0.0, 1.0))
}

pub fn is_admitted(relevance: f64, threshold: f64) -> bool {
    relevance >= threshold
}

/// Indices of grades at or above `threshold`.
pub fn admit(grades: &[f64], threshold: f64) -> Vec<usize> {
    grades.iter().enumerate().filter(|(_, g)| is_admitted(**g, threshold)).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CragError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionFailure {
    pub collection: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveRetrieval {
    /// Every graded candidate: collection order first, then descending
    /// relevance, descending cosine and ascending id.
    pub documents: Vec<GradedDocument>,
    pub failures: Vec<CollectionFailure>,
}

impl CorrectiveRetrieval {
    pub fn admitted(&self) -> impl Iterator<Item = &GradedDocument> {
        self.documents.iter().filter(|d| d.admitted)
    }
}

/// Runs retrieval and grading independently per collection.
pub fn retrieve_corrective(
    ctx: &RetrievalContext,
    collections: &[&VectorIndex],
    k: usize,
    threshold: f64,
    embedder: &dyn Embedder,
    grader: &dyn Grader,
) -> Result<CorrectiveRetrieval, CragError> {
    if k == 0 {
        return Err(CragError::InvalidK);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CragError::InvalidThreshold(format!("{threshold}")));
    }
    let mut out = CorrectiveRetrieval::default();
    let query = match embedder.embed(&ctx.query_text) {
        Ok(q) => q,
        Err(e) => {
            for c in collections {
                out.failures.push(CollectionFailure { collection: c.name().to_string(), reason: e.to_string() });
            }
            return Ok(out);
        }
    };
    for index in collections {
        let hits = match index.query(&query, k) {
            Ok(h) => h,
            Err(e) => {
                out.failures.push(CollectionFailure { collection: index.name().to_string(), reason: e.to_string() });
                continue;
            }
        };
        let mut graded: Vec<GradedDocument> = hits
            .into_iter()
            .filter_map(|hit| {
                let doc = index.get(&hit.id)?;
                let (relevance, error) = match grade_relevance(ctx, &doc.body, grader) {
                    Ok(r) => (r, None),
                    Err(e) => (0.0, Some(e.to_string())),
                };
                Some(GradedDocument {
                    collection: index.name().to_string(),
                    id: hit.id,
                    source: doc.source,
                    cosine: hit.score,
                    relevance,
                    admitted: error.is_none() && is_admitted(relevance, threshold),
                    error,
                })
            })
            .collect();
        graded.sort_by(|a, b| {
            b.relevance
                .total_cmp(&a.relevance)
                .then(b.cosine.total_cmp(&a.cosine))
                .then_with(|| a.id.cmp(&b.id))
        });
        out.documents.extend(graded);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ChatError;
    use crate::retrieval::{build_index, HashEmbedder, KnowledgeDocument};
    use alloc::collections::BTreeMap;
    use proptest::prelude::*;

    fn ctx(q: &str) -> RetrievalContext {
        RetrievalContext { mode: ContextMode::RawCode, query_text: q.into(), package: "p".into() }
    }

    #[test]
    fn overlap_grader_examples() {
        let g = OverlapGrader;
        assert_eq!(grade_relevance(&ctx("curl bash payload"), "curl bash payload", &g).unwrap(), 1.0);
        assert_eq!(grade_relevance(&ctx("alpha beta"), "gamma delta", &g).unwrap(), 0.0);
        let r = grade_relevance(&ctx("subprocess popen bash"), "uses subprocess and bash", &g).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_filter_by_hand() {
        let grades = [0.9, 0.7, 0.5, 0.3, 0.1];
        assert_eq!(admit(&grades, 0.6), [0, 1]);
        assert_eq!(admit(&grades, 0.0).len(), 5);
        assert!(admit(&grades, 1.0).is_empty());
    }

    #[test]
    fn parse_grade_bounds() {
        assert_eq!(parse_grade("Relevance: 85"), Some(85));
        assert_eq!(parse_grade("100"), Some(100));
        assert_eq!(parse_grade("150"), None);
        assert_eq!(parse_grade("none"), None);
    }

    struct Scripted(&'static str);
    impl ChatModel for Scripted {
        fn chat(&self, _: &[ChatMessage]) -> Result<String, ChatError> {
            Ok(self.0.into())
        }
    }
    struct Down;
    impl ChatModel for Down {
        fn chat(&self, _: &[ChatMessage]) -> Result<String, ChatError> {
            Err(ChatError::Timeout)
        }
    }

    #[test]
    fn llm_grader_divides_by_100() {
        let m = Scripted("73");
        assert!((LlmGrader { model: &m }.grade("q", "b").unwrap() - 0.73).abs() < 1e-12);
        let m = Scripted("not sure");
        assert!(matches!(LlmGrader { model: &m }.grade("q", "b"), Err(GraderError::Unparseable(_))));
    }

    fn collection(name: &str, bodies: &[&str]) -> VectorIndex {
        let e = HashEmbedder::default();
        let docs = bodies.iter().enumerate().map(|(i, b)| KnowledgeDocument {
            id: format!("{name}-{i}"),
            source: Source::Advisory,
            title: String::new(),
            body: (*b).into(),
            metadata: BTreeMap::new(),
            embedding: e.embed(b).unwrap(),
        });
        build_index(name, e.dimension, docs).unwrap()
    }

    #[test]
    fn corrective_retrieval_per_collection() {
        let a = collection("a", &["curl bash payload download", "markdown renderer", "bash reverse shell"]);
        let b = collection("b", &["curl downloads payload"]);
        let e = HashEmbedder::default();
        let r = retrieve_corrective(&ctx("curl bash payload"), &[&a, &b], 2, 0.6, &e, &OverlapGrader).unwrap();
        assert!(r.failures.is_empty());
        // two from a, one from b (collection smaller than k)
        assert_eq!(r.documents.len(), 3);
        assert_eq!(r.documents[0].collection, "a");
        assert_eq!(r.documents[2].collection, "b");
        assert_eq!(r.documents[0].id, "a-0");
        assert!(r.documents[0].admitted);
        let admitted: Vec<&str> = r.admitted().map(|d| d.id.as_str()).collect();
        assert_eq!(admitted, ["a-0", "b-0"]);

        let none = retrieve_corrective(&ctx("curl bash payload"), &[&a], 3, 1.0, &e, &OverlapGrader).unwrap();
        assert_eq!(none.admitted().count(), 1); // only the exact-overlap document
        let all = retrieve_corrective(&ctx("curl bash payload"), &[&a], 3, 0.0, &e, &OverlapGrader).unwrap();
        assert_eq!(all.admitted().count(), 3);
    }

    #[test]
    fn grading_failures_fail_closed() {
        let a = collection("a", &["x y z"]);
        let m = Down;
        let r = retrieve_corrective(&ctx("x"), &[&a], 1, 0.0, &HashEmbedder::default(), &LlmGrader { model: &m }).unwrap();
        assert_eq!(r.documents.len(), 1);
        assert!(!r.documents[0].admitted);
        assert!(r.documents[0].error.is_some());
    }

    #[test]
    fn failed_collection_is_reported() {
        let a = collection("a", &["x"]);
        let small = HashEmbedder { dimension: 8, ..HashEmbedder::default() };
        let r = retrieve_corrective(&ctx("x"), &[&a], 1, 0.0, &small, &OverlapGrader).unwrap();
        assert!(r.documents.is_empty());
        assert_eq!(r.failures.len(), 1);
        let r = retrieve_corrective(&ctx(""), &[&a], 1, 0.0, &HashEmbedder::default(), &OverlapGrader).unwrap();
        assert_eq!(r.failures[0].collection, "a");
    }

    #[test]
    fn argument_validation() {
        let a = collection("a", &["x"]);
        let e = HashEmbedder::default();
        assert_eq!(retrieve_corrective(&ctx("x"), &[&a], 0, 0.5, &e, &OverlapGrader), Err(CragError::InvalidK));
        assert!(retrieve_corrective(&ctx("x"), &[&a], 1, 1.5, &e, &OverlapGrader).is_err());
    }

    proptest! {
        #[test]
        fn admission_is_monotone(grades in proptest::collection::vec(0.0f64..=1.0, 0..40), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (hi, lo) = if t1 >= t2 { (t1, t2) } else { (t2, t1) };
            let strict = admit(&grades, hi);
            let loose = admit(&grades, lo);
            prop_assert!(strict.iter().all(|i| loose.contains(i)));
        }
    }

    #[test]
    fn accept_all_admits_top_k() {
        let a = collection("a", &["one", "two", "three"]);
        let r = retrieve_corrective(&ctx("one"), &[&a], 2, 0.0, &HashEmbedder::default(), &AcceptAll).unwrap();
        assert_eq!(r.admitted().count(), 2);
    }
}
