//! Per-file verdicts, package aggregation and the overall decision.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatError, ChatModel};
use crate::label::Label;
use crate::prompts::{package_summary_prompt, parse_verdict, Classification, ParsedVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Malicious,
    Benign,
    Error,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Malicious => "malicious",
            Outcome::Benign => "benign",
            Outcome::Error => "error",
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            Outcome::Malicious => Some(Label::Malicious),
            Outcome::Benign => Some(Label::Benign),
            Outcome::Error => None,
        }
    }
}

impl From<Classification> for Outcome {
    fn from(c: Classification) -> Self {
        match c {
            Classification::Malicious => Outcome::Malicious,
            Classification::Benign => Outcome::Benign,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown outcome {0:?}")]
pub struct UnknownOutcome(pub String);

impl FromStr for Outcome {
    type Err = UnknownOutcome;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "malicious" | "mal" | "1" => Ok(Outcome::Malicious),
            "benign" | "ben" | "0" => Ok(Outcome::Benign),
            "error" | "err" => Ok(Outcome::Error),
            _ => Err(UnknownOutcome(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    #[serde(alias = "zero-shot")]
    ZeroShot,
    Rag,
    Crag,
}

impl PipelineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::ZeroShot => "zero_shot",
            PipelineMode::Rag => "rag",
            PipelineMode::Crag => "crag",
        }
    }
}

impl FromStr for PipelineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" | "zero_shot" | "zeroshot" => Ok(PipelineMode::ZeroShot),
            "rag" => Ok(PipelineMode::Rag),
            "crag" => Ok(PipelineMode::Crag),
            _ => Err(format!("unknown mode {s:?} (expected zero-shot, rag or crag)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Llm,
    Rule,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Llm => "llm",
            Strategy::Rule => "rule",
        }
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(Strategy::Llm),
            "rule" => Ok(Strategy::Rule),
            _ => Err(format!("unknown strategy {s:?} (expected llm or rule)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileVerdict {
    pub rel_path: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FileVerdict {
    pub fn classified(rel_path: impl Into<String>, v: ParsedVerdict) -> Self {
        FileVerdict {
            rel_path: rel_path.into(),
            outcome: v.classification.into(),
            score: Some(v.score),
            explanation: v.explanation,
            error: None,
        }
    }

    pub fn failed(rel_path: impl Into<String>, reason: impl Into<String>) -> Self {
        FileVerdict {
            rel_path: rel_path.into(),
            outcome: Outcome::Error,
            score: None,
            explanation: String::new(),
            error: Some(reason.into()),
        }
    }

    /// Parses a provider reply; transport and parse failures become errors.
    pub fn from_response(rel_path: impl Into<String>, response: Result<String, ChatError>) -> Self {
        let rel_path = rel_path.into();
        match response {
            Ok(text) => match parse_verdict(&text) {
                Ok(v) => Self::classified(rel_path, v),
                Err(e) => Self::failed(rel_path, e.to_string()),
            },
            Err(e) => Self::failed(rel_path, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PackageAggregate {
    pub malicious_count: usize,
    pub benign_count: usize,
    pub error_count: usize,
    pub avg_malicious_score: f64,
}

impl PackageAggregate {
    pub fn total(&self) -> usize {
        self.malicious_count + self.benign_count + self.error_count
    }
}

/// Counts by outcome; the average runs over every non-error score.
pub fn aggregate(verdicts: &[FileVerdict]) -> PackageAggregate {
    let mut agg = PackageAggregate::default();
    let mut sum = 0u64;
    for v in verdicts {
        match (v.outcome, v.score) {
            (Outcome::Malicious, Some(s)) => {
                agg.malicious_count += 1;
                sum += u64::from(s);
            }
            (Outcome::Benign, Some(s)) => {
                agg.benign_count += 1;
                sum += u64::from(s);
            }
            _ => agg.error_count += 1,
        }
    }
    let n = agg.malicious_count + agg.benign_count;
    if n > 0 {
        agg.avg_malicious_score = sum as f64 / n as f64;
    }
    agg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageVerdict {
    pub package: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub explanation: String,
    pub strategy: Strategy,
    pub aggregate: PackageAggregate,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean of the malicious-file scores, rounded half away from zero.
fn malicious_mean(verdicts: &[FileVerdict]) -> u8 {
    let scores: Vec<u64> = verdicts
        .iter()
        .filter(|v| v.outcome == Outcome::Malicious)
        .filter_map(|v| v.score.map(u64::from))
        .collect();
    if scores.is_empty() {
        return 0;
    }
    let mean = scores.iter().sum::<u64>() as f64 / scores.len() as f64;
    libm::round(mean).clamp(0.0, 100.0) as u8
}

/// Deterministic offline decision: malicious iff any file is malicious.
pub fn rule_decision(verdicts: &[FileVerdict]) -> (Outcome, u8, String) {
    let agg = aggregate(verdicts);
    if agg.malicious_count > 0 {
        let flagged: Vec<&str> = verdicts
            .iter()
            .filter(|v| v.outcome == Outcome::Malicious)
            .map(|v| v.rel_path.as_str())
            .collect();
        (
            Outcome::Malicious,
            malicious_mean(verdicts),
            format!("{} of {} files classified malicious: {}", agg.malicious_count, agg.total(), flagged.join(", ")),
        )
    } else {
        (Outcome::Benign, 0, format!("no malicious files among {}", agg.total()))
    }
}

/// `rel_path: outcome (score)` lines, keeping whole lines from the head
/// while the digest fits `budget` bytes.
pub fn package_info_digest(verdicts: &[FileVerdict], budget: usize) -> String {
    let mut out = String::new();
    for v in verdicts {
        let line = match v.score {
            Some(s) => format!("{}: {} ({})", v.rel_path, v.outcome, s),
            None => format!("{}: {}", v.rel_path, v.outcome),
        };
        let extra = if out.is_empty() { line.len() } else { line.len() + 1 };
        if out.len() + extra > budget {
            break;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&line);
    }
    out
}

/// Overall package verdict from already classified files.
pub fn classify_package(
    package: &str,
    verdicts: &[FileVerdict],
    strategy: Strategy,
    model: Option<&dyn ChatModel>,
    digest_budget: usize,
    fingerprint: &str,
) -> PackageVerdict {
    let agg = aggregate(verdicts);
    let mut pv = PackageVerdict {
        package: package.to_string(),
        outcome: Outcome::Error,
        score: None,
        explanation: String::new(),
        strategy,
        aggregate: agg,
        fingerprint: fingerprint.to_string(),
        error: None,
    };
    if agg.malicious_count + agg.benign_count == 0 {
        pv.error = Some(format!("no file of {} could be classified", agg.total()));
        return pv;
    }
    match strategy {
        Strategy::Rule => {
            let (outcome, score, explanation) = rule_decision(verdicts);
            pv.outcome = outcome;
            pv.score = Some(score);
            pv.explanation = explanation;
        }
        Strategy::Llm => {
            let Some(model) = model else {
                pv.error = Some("llm strategy requires a chat model".into());
                return pv;
            };
            let digest = package_info_digest(verdicts, digest_budget);
            let messages = package_summary_prompt(agg.malicious_count, agg.benign_count, agg.avg_malicious_score, &digest);
            match model.chat(&messages).map_err(|e| e.to_string()).and_then(|r| parse_verdict(&r).map_err(|e| e.to_string())) {
                Ok(v) => {
                    pv.outcome = v.classification.into();
                    pv.score = Some(v.score);
                    pv.explanation = v.explanation;
                }
                Err(e) => pv.error = Some(e),
            }
        }
    }
    pv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ChatMessage;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn fv(path: &str, outcome: Outcome, score: Option<u8>) -> FileVerdict {
        FileVerdict { rel_path: path.into(), outcome, score, explanation: String::new(), error: None }
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[
            fv("a", Outcome::Malicious, Some(80)),
            fv("b", Outcome::Malicious, Some(90)),
            fv("c", Outcome::Benign, Some(10)),
        ]);
        assert_eq!((a.malicious_count, a.benign_count, a.error_count), (2, 1, 0));
        assert_eq!(a.avg_malicious_score, 60.0);
        assert_eq!(aggregate(&[]), PackageAggregate::default());
        let a = aggregate(&[FileVerdict::failed("x", "boom")]);
        assert_eq!((a.error_count, a.avg_malicious_score), (1, 0.0));
    }

    #[test]
    fn from_response_paths() {
        let v = FileVerdict::from_response("setup.py", Ok("Malicious, 90".into()));
        assert_eq!((v.outcome, v.score), (Outcome::Malicious, Some(90)));
        let v = FileVerdict::from_response("setup.py", Ok("I'm sorry, I can't help with that.".into()));
        assert_eq!((v.outcome, v.score), (Outcome::Error, None));
        assert!(v.error.is_some());
        let v = FileVerdict::from_response("setup.py", Err(ChatError::Timeout));
        assert_eq!(v.outcome, Outcome::Error);
    }

    #[test]
    fn rule_strategy_examples() {
        let files = [
            fv("a", Outcome::Malicious, Some(80)),
            fv("b", Outcome::Malicious, Some(90)),
            fv("c", Outcome::Benign, Some(10)),
        ];
        let pv = classify_package("p", &files, Strategy::Rule, None, 100, "fp");
        assert_eq!((pv.outcome, pv.score), (Outcome::Malicious, Some(85)));
        let benign: Vec<FileVerdict> = (0..5).map(|i| fv(&format!("f{i}"), Outcome::Benign, Some(3))).collect();
        let pv = classify_package("p", &benign, Strategy::Rule, None, 100, "fp");
        assert_eq!((pv.outcome, pv.score), (Outcome::Benign, Some(0)));
        // half away from zero
        let files = [fv("a", Outcome::Malicious, Some(80)), fv("b", Outcome::Malicious, Some(81))];
        assert_eq!(rule_decision(&files).1, 81);
    }

    struct Fixed(&'static str);
    impl ChatModel for Fixed {
        fn chat(&self, _: &[ChatMessage]) -> Result<String, ChatError> {
            Ok(self.0.into())
        }
    }

    #[test]
    fn llm_strategy() {
        let files = [fv("a", Outcome::Benign, Some(5))];
        let pv = classify_package("p", &files, Strategy::Llm, Some(&Fixed("Overall Classification: Benign, 5")), 100, "fp");
        assert_eq!((pv.outcome, pv.score), (Outcome::Benign, Some(5)));
        let pv = classify_package("p", &files, Strategy::Llm, Some(&Fixed("no idea")), 100, "fp");
        assert_eq!(pv.outcome, Outcome::Error);
        assert!(pv.error.is_some());
        let pv = classify_package("p", &files, Strategy::Llm, None, 100, "fp");
        assert_eq!(pv.outcome, Outcome::Error);
    }

    #[test]
    fn nothing_classified_is_an_error() {
        let files = [fv("a.py", Outcome::Error, None), fv("b.py", Outcome::Error, None)];
        for strategy in [Strategy::Rule, Strategy::Llm] {
            let pv = classify_package("p", &files, strategy, Some(&Fixed("Overall Classification: Benign, 5")), 100, "fp");
            assert_eq!((pv.outcome, pv.score), (Outcome::Error, None));
            assert!(pv.error.is_some());
        }
        let pv = classify_package("p", &[], Strategy::Rule, None, 100, "fp");
        assert_eq!(pv.outcome, Outcome::Error);
    }

    #[test]
    fn digest_truncates_from_head() {
        let files = [fv("a.py", Outcome::Malicious, Some(90)), fv("b.py", Outcome::Error, None)];
        assert_eq!(package_info_digest(&files, 1000), "a.py: malicious (90)\nb.py: error");
        assert_eq!(package_info_digest(&files, 22), "a.py: malicious (90)");
        assert_eq!(package_info_digest(&files, 3), "");
    }

    fn arb_verdict() -> impl PropStrategy<Value = FileVerdict> {
        (0u8..3, 0u8..=100, "[a-z]{1,6}").prop_map(|(o, s, p)| match o {
            0 => fv(&p, Outcome::Malicious, Some(s)),
            1 => fv(&p, Outcome::Benign, Some(s)),
            _ => FileVerdict::failed(p, "x"),
        })
    }

    proptest! {
        #[test]
        fn aggregate_conserves_and_ignores_order(mut vs in proptest::collection::vec(arb_verdict(), 0..40), seed in any::<u64>()) {
            let a = aggregate(&vs);
            prop_assert_eq!(a.total(), vs.len());
            prop_assert!((0.0..=100.0).contains(&a.avg_malicious_score));
            let n = vs.len();
            if n > 1 {
                vs.swap(0, (seed as usize) % n);
                vs.reverse();
            }
            let b = aggregate(&vs);
            prop_assert_eq!((a.malicious_count, a.benign_count, a.error_count), (b.malicious_count, b.benign_count, b.error_count));
            prop_assert!((a.avg_malicious_score - b.avg_malicious_score).abs() < 1e-9);
        }

        #[test]
        fn adding_malicious_never_flips_to_benign(vs in proptest::collection::vec(arb_verdict(), 0..20), s in 0u8..=100) {
            let before = rule_decision(&vs).0;
            let mut more = vs.clone();
            more.push(fv("extra", Outcome::Malicious, Some(s)));
            let after = rule_decision(&more).0;
            prop_assert_eq!(after, Outcome::Malicious);
            if before == Outcome::Malicious {
                prop_assert_eq!(after, Outcome::Malicious);
            }
        }
    }
}
