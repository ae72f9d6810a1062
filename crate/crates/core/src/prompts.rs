//! Prompt construction and tolerant parsing of verdict responses.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::retrieval::Source;

pub const FILE_ANALYSIS_DEVELOPER: &str = include_str!("../templates/file_analysis_developer.txt");
pub const FILE_ANALYSIS_USER: &str = include_str!("../templates/file_analysis_user.txt");
pub const PACKAGE_SUMMARY: &str = include_str!("../templates/package_summary.txt");
pub const PACKAGE_INFO: &str = include_str!("../templates/package_info.txt");

/// Heading of the retrieved-knowledge section in augmented prompts.
pub const CONTEXT_HEADING: &str = "Relevant security knowledge:";

/// Default byte budget for the retrieved-knowledge section.
pub const DEFAULT_CONTEXT_BUDGET: usize = 6000;

/// Single-pass placeholder substitution. Substituted values are never
/// rescanned, so braces inside them are copied literally.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = vars.iter().find(|(k, _)| {
            tail.len() > k.len() + 1 && tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}')
        });
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Two-decimal rendering, ties to even on the exact binary value.
pub fn format_score(x: f64) -> String {
    format!("{x:.2}")
}

pub fn file_analysis_prompt(file_name: &str, file_content: &str) -> Vec<ChatMessage> {
    alloc::vec![
        ChatMessage::developer(fill(FILE_ANALYSIS_DEVELOPER, &[("file_name", file_name)])),
        ChatMessage::user(fill(FILE_ANALYSIS_USER, &[("file_content", file_content)])),
    ]
}

/// Appends few-shot examples to the developer message, if any.
pub fn with_few_shot(mut messages: Vec<ChatMessage>, examples: Option<&str>) -> Vec<ChatMessage> {
    if let Some(ex) = examples.filter(|e| !e.trim().is_empty()) {
        if let Some(dev) = messages.iter_mut().find(|m| m.role == crate::chat::Role::Developer) {
            dev.content.push_str("\n\n");
            dev.content.push_str(ex);
        }
    }
    messages
}

/// Overall-risk prompt followed by the package summary request.
pub fn package_summary_prompt(
    malicious_count: usize,
    benign_count: usize,
    avg_score: f64,
    package_info: &str,
) -> Vec<ChatMessage> {
    let mal = malicious_count.to_string();
    let ben = benign_count.to_string();
    let avg = format_score(avg_score);
    alloc::vec![
        ChatMessage::user(fill(
            PACKAGE_SUMMARY,
            &[("malicious_count", &mal), ("benign_count", &ben), ("avg_malicious_score:.2f", &avg)],
        )),
        ChatMessage::user(fill(PACKAGE_INFO, &[("package_info", package_info)])),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub source: Source,
    pub id: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RagPrompt {
    pub messages: Vec<ChatMessage>,
    pub included: usize,
    pub dropped: usize,
}

fn context_section(docs: &[ContextDocument]) -> String {
    let mut s = String::from(CONTEXT_HEADING);
    for d in docs {
        s.push('\n');
        s.push_str(&format!("[{}:{}] {}", d.source, d.id, d.body));
    }
    s
}

/// File-analysis prompt whose user message is prefixed by retrieved
/// documents, in the given order. Documents are dropped from the tail until
/// the knowledge section fits `budget` bytes; with none left the result is
/// exactly [`file_analysis_prompt`].
pub fn rag_prompt(docs: &[ContextDocument], file_name: &str, snippet: &str, budget: usize) -> RagPrompt {
    let mut keep = docs.len();
    let mut section = context_section(docs);
    while keep > 0 && section.len() > budget {
        keep -= 1;
        section = context_section(&docs[..keep]);
    }
    let mut messages = file_analysis_prompt(file_name, snippet);
    if keep > 0 {
        let user = &mut messages[1].content;
        *user = format!("{section}\n\n{user}");
    }
    RagPrompt { messages, included: keep, dropped: docs.len() - keep }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Malicious,
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub classification: Classification,
    pub score: u8,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed verdict: {0}")]
pub struct MalformedVerdict(pub String);

fn is_decoration(c: char) -> bool {
    c.is_whitespace() || matches!(c, '*' | ':' | '_' | '=' | '#' | '`')
}

fn classification_word(word: &str) -> Option<Classification> {
    match word {
        "malicious" => Some(Classification::Malicious),
        "benign" => Some(Classification::Benign),
        _ => None,
    }
}

/// First `malicious`/`benign` word in `lower[from..]`, restricted to the
/// first non-blank line. Returns the class and the absolute end offset.
fn class_on_line(lower: &str, from: usize) -> Option<(Classification, usize)> {
    let rest = &lower[from..];
    let skipped = rest.len() - rest.trim_start_matches(is_decoration).len();
    let line_start = from + skipped;
    let line = &lower[line_start..];
    let line = &line[..line.find('\n').unwrap_or(line.len())];
    let mut pos = 0;
    for word in line.split(|c: char| !c.is_ascii_alphabetic()) {
        let start = pos;
        pos += word.len() + 1;
        if let Some(c) = classification_word(word) {
            return Some((c, line_start + start + word.len()));
        }
    }
    None
}

/// Digit run at `at`, checked against 0..=100. `Ok(None)` when no digit
/// starts there.
fn score_at(lower: &str, at: usize) -> Result<Option<u8>, MalformedVerdict> {
    let rest = &lower[at..];
    if rest.starts_with('-') && rest[1..].starts_with(|c: char| c.is_ascii_digit()) {
        return Err(MalformedVerdict("negative score".into()));
    }
    let len = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    if len == 0 {
        return Ok(None);
    }
    match rest[..len].parse::<u32>() {
        Ok(v) if v <= 100 => Ok(Some(v as u8)),
        _ => Err(MalformedVerdict(format!("score {} outside 0-100", &rest[..len]))),
    }
}

/// Extracts classification, score and explanation from a free-form reply.
///
/// * Classification: the first `malicious`/`benign` on the line following a
///   `classification` field name; without a field name the reply must open
///   with the bare word.
/// * Score: the first integer directly after a `score` field name, else the
///   first integer after the classification. Values outside 0-100 are
///   rejected, never clamped.
/// * Explanation: everything after the `explanation` field name, or empty.
pub fn parse_verdict(response: &str) -> Result<ParsedVerdict, MalformedVerdict> {
    let lower = response.to_ascii_lowercase();
    let (classification, class_end) = match lower.find("classification") {
        Some(i) => class_on_line(&lower, i + "classification".len())
            .ok_or_else(|| MalformedVerdict("classification field without a malicious/benign value".into()))?,
        None => {
            let body = lower.trim_start_matches(|c: char| !c.is_ascii_alphanumeric());
            let start = lower.len() - body.len();
            let word = &body[..body.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(body.len())];
            let c = classification_word(word).ok_or_else(|| MalformedVerdict("no classification found".into()))?;
            (c, start + word.len())
        }
    };

    let mut score = None;
    let mut from = 0;
    while let Some(i) = lower[from..].find("score") {
        let after = from + i + "score".len();
        let rest = &lower[after..];
        let value_at = after + (rest.len() - rest.trim_start_matches(is_decoration).len());
        if let Some(v) = score_at(&lower, value_at)? {
            score = Some(v);
            break;
        }
        from = after;
    }
    if score.is_none() {
        if let Some(i) = lower[class_end..].find(|c: char| c.is_ascii_digit()) {
            let at = class_end + i;
            let at = if at > 0 && lower.as_bytes()[at - 1] == b'-' { at - 1 } else { at };
            score = score_at(&lower, at)?;
        }
    }
    let score = score.ok_or_else(|| MalformedVerdict("no score found".into()))?;

    let explanation = match lower.find("explanation") {
        Some(i) => {
            let rest = &response[i + "explanation".len()..];
            rest.trim_start_matches(is_decoration).trim_end().to_string()
        }
        None => String::new(),
    };
    Ok(ParsedVerdict { classification, score, explanation })
}

/// Renders a verdict in the answer format requested by the file prompt.
pub fn render_verdict(v: &ParsedVerdict) -> String {
    let class = match v.classification {
        Classification::Malicious => "Malicious",
        Classification::Benign => "Benign",
    };
    format!(
        "- **Predicted Classification**: {class}\n- **Malicious Score**: {}\n- **Explanation**: {}",
        v.score, v.explanation
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_prompt_substitutes_name_and_content() {
        let m = file_analysis_prompt("setup.py", "print(1)");
        assert!(m[0].content.contains("in setup.py below"));
        assert!(m[0].content.contains("- **Predicted Classification**: (Malicious or Benign)"));
        assert!(m[0].content.contains("- **Malicious Score**: (0-100, where 100 means highly malicious)"));
        assert!(m[0].content.starts_with("You are a cybersecurity expert analyzing potential malware."));
        assert_eq!(m[1].content, "file content: print(1)");
        assert_eq!(file_analysis_prompt("a.py", "")[1].content, "file content: ");
    }

    #[test]
    fn braces_are_not_rescanned() {
        let m = file_analysis_prompt("a{b}.py", "{file_name} {file_content}");
        assert!(m[0].content.contains("in a{b}.py below"));
        assert_eq!(m[1].content, "file content: {file_name} {file_content}");
    }

    #[test]
    fn fill_leaves_unknown_placeholders() {
        assert_eq!(fill("{a}-{b}-{", &[("a", "1")]), "1-{b}-{");
    }

    #[test]
    fn two_decimal_rendering() {
        assert_eq!(format_score(60.0), "60.00");
        assert_eq!(format_score(0.0), "0.00");
        assert_eq!(format_score(33.3333), "33.33");
        // exact binary ties go to the even neighbour
        assert_eq!(format_score(0.125), "0.12");
        assert_eq!(format_score(0.375), "0.38");
        assert_eq!(format_score(2.5 / 100.0 * 100.0), "2.50");
    }

    #[test]
    fn summary_prompt_fields() {
        let m = package_summary_prompt(2, 1, 60.0, "setup.py: malicious (90)");
        assert!(m[0].content.contains("- Number of Malicious Files: 2"));
        assert!(m[0].content.contains("- Number of Benign Files: 1"));
        assert!(m[0].content.contains("Average Malicious Score: 60.00"));
        assert!(m[0].content.contains("1. **Overall Classification**: (Malicious or Benign)"));
        assert!(m[1].content.ends_with("given this information:\nsetup.py: malicious (90)"));
        assert!(package_summary_prompt(0, 0, 0.0, "")[0].content.contains("Average Malicious Score: 0.00"));
        assert!(package_summary_prompt(1, 3, 33.3333, "")[0].content.contains("Average Malicious Score: 33.33"));
    }

    fn doc(id: &str, body: &str) -> ContextDocument {
        ContextDocument { source: Source::Yara, id: id.into(), body: body.into() }
    }

    #[test]
    fn rag_prompt_without_documents_is_plain() {
        let p = rag_prompt(&[], "setup.py", "import os", 1000);
        assert_eq!(p.messages, file_analysis_prompt("setup.py", "import os"));
        assert_eq!((p.included, p.dropped), (0, 0));
    }

    #[test]
    fn rag_prompt_keeps_order() {
        let p = rag_prompt(&[doc("b", "second rule"), doc("a", "first rule")], "setup.py", "x", 1000);
        assert_eq!(
            p.messages[1].content,
            "Relevant security knowledge:\n[yara:b] second rule\n[yara:a] first rule\n\nfile content: x"
        );
        assert_eq!(p.messages[0], file_analysis_prompt("setup.py", "x")[0]);
    }

    #[test]
    fn rag_prompt_drops_tail_over_budget() {
        let docs = [doc("a", "short"), doc("b", &"long ".repeat(50))];
        let budget = context_section(&docs[..1]).len();
        let p = rag_prompt(&docs, "f.py", "x", budget);
        assert_eq!((p.included, p.dropped), (1, 1));
        assert!(p.messages[1].content.contains("[yara:a] short"));
        assert!(!p.messages[1].content.contains("[yara:b]"));
    }

    #[test]
    fn parses_answer_format() {
        let v = parse_verdict("- **Predicted Classification**: Malicious\n- **Malicious Score**: 87\n- **Explanation**: downloads payload.").unwrap();
        assert_eq!(
            v,
            ParsedVerdict { classification: Classification::Malicious, score: 87, explanation: "downloads payload.".into() }
        );
    }

    #[test]
    fn parses_loose_forms() {
        let v = parse_verdict("Classification: benign, score 0").unwrap();
        assert_eq!((v.classification, v.score, v.explanation.as_str()), (Classification::Benign, 0, ""));
        let v = parse_verdict("Malicious, 90").unwrap();
        assert_eq!((v.classification, v.score), (Classification::Malicious, 90));
        let v = parse_verdict("Benign, score 0").unwrap();
        assert_eq!((v.classification, v.score), (Classification::Benign, 0));
        let v = parse_verdict("Overall Classification: Benign, 5").unwrap();
        assert_eq!((v.classification, v.score), (Classification::Benign, 5));
        let v = parse_verdict("1. **Overall Classification**: **Malicious**\n2. **Overall Malicious Score**: 95\n3. **Overall Explanation**: steals tokens").unwrap();
        assert_eq!((v.classification, v.score, v.explanation.as_str()), (Classification::Malicious, 95, "steals tokens"));
        let v = parse_verdict("Malicious Score: 12\nPredicted Classification: Benign").unwrap();
        assert_eq!((v.classification, v.score), (Classification::Benign, 12));
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_verdict("I cannot help with that.").is_err());
        assert!(parse_verdict("").is_err());
        assert!(parse_verdict("Predicted Classification: unknown\nScore: 4").is_err());
        assert!(parse_verdict("Predicted Classification: Malicious").is_err());
        assert!(parse_verdict("Predicted Classification: Malicious\nMalicious Score: 150").is_err());
        assert!(parse_verdict("Predicted Classification: Malicious\nMalicious Score: -3").is_err());
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(mal in any::<bool>(), score in 0u8..=100, expl in "[A-Za-z0-9][A-Za-z0-9 .,]{0,60}[A-Za-z0-9.]") {
            let v = ParsedVerdict {
                classification: if mal { Classification::Malicious } else { Classification::Benign },
                score,
                explanation: expl,
            };
            prop_assert_eq!(parse_verdict(&render_verdict(&v)).unwrap(), v);
        }
    }
}
