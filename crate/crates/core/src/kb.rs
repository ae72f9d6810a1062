//! Turning raw knowledge sources into [`KnowledgeDocument`]s.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatError, ChatModel};
use crate::label::Label;
use crate::retrieval::{EmbedError, Embedder, KnowledgeDocument, Source};
use crate::yara::{describe_rule, YaraRule};

/// Default upper bound, in characters, for malicious setup.py snippets.
pub const DEFAULT_SNIPPET_MAX_LEN: usize = 20_000;

/// One advisory as read from the line-delimited input. GitHub's field names
/// (`ghsa_id`) are accepted as aliases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisoryRecord {
    #[serde(default, alias = "ghsa_id")]
    pub id: Option<String>,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub severity: Option<String>,
    #[serde(default)]
    pub package: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingField {
    /// Record id, or `#<line index>` when the id itself is missing.
    pub record: String,
    pub field: &'static str,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdvisoryIngest {
    pub documents: Vec<KnowledgeDocument>,
    pub skipped: Vec<MissingField>,
}

fn present(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

/// One document per usable advisory; body is summary then description.
pub fn ingest_advisories(records: impl IntoIterator<Item = AdvisoryRecord>) -> AdvisoryIngest {
    let mut out = AdvisoryIngest::default();
    for (i, rec) in records.into_iter().enumerate() {
        let Some(id) = present(&rec.id) else {
            out.skipped.push(MissingField { record: format!("#{i}"), field: "id" });
            continue;
        };
        let Some(summary) = present(&rec.summary) else {
            out.skipped.push(MissingField { record: id.to_string(), field: "summary" });
            continue;
        };
        let body = match present(&rec.description) {
            Some(desc) => format!("{summary}\n\n{desc}"),
            None => summary.to_string(),
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("advisory_id".to_string(), id.to_string());
        if let Some(sev) = present(&rec.severity) {
            metadata.insert("severity".to_string(), sev.to_string());
        }
        if let Some(pkg) = present(&rec.package) {
            metadata.insert("package".to_string(), pkg.to_string());
        }
        out.documents.push(KnowledgeDocument {
            id: id.to_string(),
            source: Source::Advisory,
            title: summary.to_string(),
            body,
            metadata,
            embedding: Vec::new(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRow {
    /// Package the snippet came from; doubles as the document id.
    pub package: String,
    #[serde(default = "malicious")]
    pub label: Label,
    pub text: String,
}

fn malicious() -> Label {
    Label::Malicious
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    TooLong,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub chars: usize,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnippetIngest {
    pub documents: Vec<KnowledgeDocument>,
    pub excluded: Vec<Exclusion>,
}

impl SnippetIngest {
    pub fn too_long(&self) -> usize {
        self.excluded.iter().filter(|e| e.reason == ExclusionReason::TooLong).count()
    }
}

/// Keeps snippets of at most `max_len` characters. Repeated package names
/// get a `#n` suffix so ids stay unique.
pub fn ingest_snippets(rows: impl IntoIterator<Item = SnippetRow>, max_len: usize) -> SnippetIngest {
    let mut out = SnippetIngest::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for row in rows {
        let n = seen.entry(row.package.clone()).or_insert(0);
        *n += 1;
        let id = if *n == 1 { row.package.clone() } else { format!("{}#{}", row.package, n) };
        let chars = row.text.chars().count();
        if row.text.trim().is_empty() {
            out.excluded.push(Exclusion { id, chars, reason: ExclusionReason::Empty });
            continue;
        }
        if chars > max_len {
            out.excluded.push(Exclusion { id, chars, reason: ExclusionReason::TooLong });
            continue;
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("package".to_string(), row.package.clone());
        metadata.insert("label".to_string(), row.label.to_string());
        out.documents.push(KnowledgeDocument {
            id,
            source: Source::Snippet,
            title: format!("{} setup.py", row.package),
            body: row.text,
            metadata,
            embedding: Vec::new(),
        });
    }
    out
}

/// One document per rule, bodied by its description.
pub fn yara_documents(rules: &[YaraRule], llm: Option<&dyn ChatModel>) -> Result<Vec<KnowledgeDocument>, ChatError> {
    let mut ids = BTreeSet::new();
    let mut docs = Vec::with_capacity(rules.len());
    for rule in rules {
        let mut id = rule.identifier.clone();
        let mut n = 1;
        while !ids.insert(id.clone()) {
            n += 1;
            id = format!("{}#{}", rule.identifier, n);
        }
        let mut metadata = BTreeMap::new();
        let rule_id = rule.meta_value("id").map(|v| v.as_display()).unwrap_or_else(|| rule.identifier.clone());
        metadata.insert("rule_id".to_string(), rule_id);
        for key in ["author", "os", "date"] {
            if let Some(v) = rule.meta_value(key) {
                metadata.insert(key.to_string(), v.as_display());
            }
        }
        if !rule.tags.is_empty() {
            metadata.insert("tags".to_string(), rule.tags.join(" "));
        }
        docs.push(KnowledgeDocument {
            id,
            source: Source::Yara,
            title: rule.identifier.clone(),
            body: describe_rule(rule, llm)?,
            metadata,
            embedding: Vec::new(),
        });
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("embedding document {id}: {source}")]
pub struct DocumentEmbedError {
    pub id: String,
    pub source: EmbedError,
}

/// Fills in every document's embedding.
pub fn embed_all(docs: &mut [KnowledgeDocument], embedder: &dyn Embedder) -> Result<(), DocumentEmbedError> {
    for d in docs.iter_mut() {
        d.embedding = embedder
            .embed(&d.body)
            .map_err(|source| DocumentEmbedError { id: d.id.clone(), source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::HashEmbedder;
    use crate::yara::parse_yara;
    use alloc::vec;

    fn adv(id: &str, summary: &str, description: Option<&str>) -> AdvisoryRecord {
        AdvisoryRecord {
            id: Some(id.into()),
            summary: Some(summary.into()),
            description: description.map(Into::into),
            severity: Some("high".into()),
            package: Some("requests".into()),
        }
    }

    #[test]
    fn advisories_count_preserved() {
        let recs = vec![adv("A-1", "s1", Some("d1")), adv("A-2", "s2", Some("d2")), adv("A-3", "s3", Some("d3"))];
        let out = ingest_advisories(recs);
        assert_eq!(out.documents.len(), 3);
        assert!(out.skipped.is_empty());
        assert_eq!(out.documents[0].body, "s1\n\nd1");
        assert_eq!(out.documents[0].metadata["severity"], "high");
        assert_eq!(out.documents[0].metadata["package"], "requests");
    }

    #[test]
    fn advisory_without_description_uses_summary() {
        let out = ingest_advisories([adv("A-1", "only summary", None)]);
        assert_eq!(out.documents[0].body, "only summary");
    }

    #[test]
    fn advisory_missing_fields_are_reported() {
        let out = ingest_advisories([
            AdvisoryRecord { summary: Some("x".into()), ..Default::default() },
            AdvisoryRecord { id: Some("A-9".into()), ..Default::default() },
        ]);
        assert!(out.documents.is_empty());
        assert_eq!(
            out.skipped,
            [MissingField { record: "#0".into(), field: "id" }, MissingField { record: "A-9".into(), field: "summary" }]
        );
    }

    fn snippet(pkg: &str, len: usize) -> SnippetRow {
        SnippetRow { package: pkg.into(), label: Label::Malicious, text: "x".repeat(len) }
    }

    #[test]
    fn snippet_threshold() {
        let out = ingest_snippets([snippet("a", 10), snippet("b", 21), snippet("c", 20)], 20);
        assert_eq!(out.documents.len(), 2);
        assert_eq!(out.too_long(), 1);
        assert_eq!(out.excluded[0].id, "b");
        let out = ingest_snippets([snippet("a", 10), snippet("b", 21)], 1);
        assert!(out.documents.is_empty());
        assert_eq!(out.too_long(), 2);
    }

    #[test]
    fn snippet_ids_are_unique() {
        let out = ingest_snippets([snippet("a", 3), snippet("a", 4)], 100);
        let ids: Vec<&str> = out.documents.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "a#2"]);
        assert_eq!(out.documents[0].metadata["label"], "1");
    }

    #[test]
    fn yara_docs_carry_metadata() {
        let rules = parse_yara(
            r#"rule r1 : pypi { meta: author = "me" os = "linux" id = "abc" condition: true }
rule r1 { condition: false }"#,
        )
        .unwrap()
        .rules;
        let docs = yara_documents(&rules, None).unwrap();
        assert_eq!(docs[0].metadata["rule_id"], "abc");
        assert_eq!(docs[0].metadata["author"], "me");
        assert_eq!(docs[0].metadata["os"], "linux");
        assert_eq!(docs[1].id, "r1#2");
        assert_eq!(docs[1].metadata["rule_id"], "r1");
    }

    #[test]
    fn embed_all_fills_vectors() {
        let mut docs = ingest_advisories([adv("A-1", "s", None)]).documents;
        embed_all(&mut docs, &HashEmbedder::default()).unwrap();
        assert_eq!(docs[0].embedding.len(), 1536);
    }
}
