//! Package scanning: ingest, features, retrieval, per-file verdicts and the
//! package verdict.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{debug, warn};
use pkgscan_core::crag::{retrieve_corrective, AcceptAll, ContextMode, Grader, LlmGrader, OverlapGrader, RetrievalContext};
use pkgscan_core::describe::{package_description, render_description, TextualDescription};
use pkgscan_core::features::FeatureVector;
use pkgscan_core::prompts::{file_analysis_prompt, rag_prompt, with_few_shot, ContextDocument};
use pkgscan_core::retrieval::{Embedder, Source, VectorIndex};
use pkgscan_core::verdict::{classify_package, FileVerdict, PackageAggregate, PackageVerdict, PipelineMode};
use pkgscan_core::{ChatModel, Label, Outcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::GraderKind;
use crate::corpus::CorpusEntry;
use crate::ingest::{extract_setup_snippet, load_package, utf8_prefix, IngestOptions, PackageRecord};
use crate::pyfeatures::source_features;
use crate::runtime::Runtime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    #[serde(flatten)]
    pub verdict: FileVerdict,
    pub bytes: u64,
    pub is_python: bool,
    #[serde(default, skip_serializing_if = "FeatureVector::is_empty")]
    pub features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    /// Context documents kept and dropped by the prompt budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageReport {
    pub package: String,
    pub source: String,
    pub label: Option<Label>,
    pub mode: PipelineMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_mode: Option<ContextMode>,
    pub verdict: PackageVerdict,
    pub files: Vec<FileReport>,
}

/// One line of the retrieval audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub package: String,
    pub collection: String,
    pub id: Option<String>,
    pub source: Option<Source>,
    pub cosine: Option<f64>,
    pub relevance: Option<f64>,
    pub admitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ScanOutput {
    pub reports: Vec<PackageReport>,
    pub audit: Vec<AuditRecord>,
}

struct Analyzed {
    report: FileReport,
    readable: bool,
    content: String,
    description: Option<TextualDescription>,
}

fn analyze_file(rt: &Runtime, record: &PackageRecord, idx: usize) -> Analyzed {
    let entry = &record.files[idx];
    let bytes = match entry.read_bytes() {
        Ok(b) => b,
        Err(e) => {
            return Analyzed {
                report: FileReport {
                    verdict: FileVerdict::failed(&entry.rel_path, format!("read failed: {e}")),
                    bytes: entry.bytes,
                    is_python: entry.is_python,
                    features: FeatureVector::new(),
                    description: None,
                    parse_error: None,
                    context: None,
                },
                readable: false,
                content: String::new(),
                description: None,
            }
        }
    };
    let content = String::from_utf8_lossy(utf8_prefix(&bytes, rt.config.prompt.file_budget)).into_owned();
    let mut features = FeatureVector::new();
    let mut description = None;
    let mut parse_error = None;
    if entry.is_python {
        let source = String::from_utf8_lossy(&bytes);
        match source_features(&source, &entry.rel_path, &rt.manifest) {
            Ok(fv) => {
                features = fv;
                description = Some(render_description(&record.name, &entry.rel_path, &fv));
            }
            Err(e) => parse_error = Some(e.to_string()),
        }
    }
    Analyzed {
        report: FileReport {
            // Placeholder until the model answers.
            verdict: FileVerdict::failed(&entry.rel_path, "not classified"),
            bytes: entry.bytes,
            is_python: entry.is_python,
            features,
            description: description.as_ref().map(|d| d.rendered.clone()),
            parse_error,
            context: None,
        },
        readable: true,
        content,
        description,
    }
}

/// Retrieval query for a package, or `None` when nothing can be queried.
fn query_text(rt: &Runtime, record: &PackageRecord, files: &[Analyzed], mode: ContextMode) -> Option<String> {
    let text = match mode {
        ContextMode::RawCode => match extract_setup_snippet(record, rt.config.ingest.snippet_budget) {
            Ok(Some(s)) => s,
            Ok(None) => {
                // No setup.py: the first Python file stands in.
                let first = files.iter().find(|f| f.report.is_python)?;
                String::from_utf8_lossy(utf8_prefix(first.content.as_bytes(), rt.config.ingest.snippet_budget)).into_owned()
            }
            Err(e) => {
                warn!("{}: reading setup.py: {e}", record.name);
                return None;
            }
        },
        ContextMode::AstDescription => package_description(files.iter().filter_map(|f| f.description.as_ref())),
    };
    let capped = String::from_utf8_lossy(utf8_prefix(text.as_bytes(), rt.embedder.max_input())).into_owned();
    (!capped.trim().is_empty()).then_some(capped)
}

fn retrieve(rt: &Runtime, record: &PackageRecord, files: &[Analyzed], audit: &mut Vec<AuditRecord>) -> Vec<ContextDocument> {
    let mode = rt.config.scan.mode;
    let ctx_mode = rt.config.crag.mode;
    let collections: Vec<&VectorIndex> = rt.collections.iter().collect();
    let Some(query) = query_text(rt, record, files, ctx_mode) else {
        for c in &collections {
            audit.push(AuditRecord {
                package: record.name.clone(),
                collection: c.name().to_string(),
                id: None,
                source: None,
                cosine: None,
                relevance: None,
                admitted: false,
                error: Some("empty query".into()),
            });
        }
        return Vec::new();
    };
    let ctx = RetrievalContext { mode: ctx_mode, query_text: query, package: record.name.clone() };
    let llm_grader = LlmGrader { model: &rt.chat };
    let (grader, threshold): (&dyn Grader, f64) = match (mode, rt.config.crag.grader) {
        (PipelineMode::Rag, _) => (&AcceptAll, 0.0),
        (_, GraderKind::Overlap) => (&OverlapGrader, rt.config.crag.threshold),
        (_, GraderKind::Llm) => (&llm_grader, rt.config.crag.threshold),
    };
    let result = match retrieve_corrective(&ctx, &collections, rt.config.crag.k, threshold, &rt.embedder, grader) {
        Ok(r) => r,
        Err(e) => {
            warn!("{}: retrieval: {e}", record.name);
            return Vec::new();
        }
    };
    for f in &result.failures {
        audit.push(AuditRecord {
            package: record.name.clone(),
            collection: f.collection.clone(),
            id: None,
            source: None,
            cosine: None,
            relevance: None,
            admitted: false,
            error: Some(f.reason.clone()),
        });
    }
    for d in &result.documents {
        audit.push(AuditRecord {
            package: record.name.clone(),
            collection: d.collection.clone(),
            id: Some(d.id.clone()),
            source: Some(d.source),
            cosine: Some(d.cosine),
            relevance: Some(d.relevance),
            admitted: d.admitted,
            error: d.error.clone(),
        });
    }
    result
        .admitted()
        .filter_map(|d| {
            let index = rt.collections.iter().find(|c| c.name() == d.collection)?;
            let doc = index.get(&d.id)?;
            Some(ContextDocument { source: d.source, id: d.id.clone(), body: doc.body.clone() })
        })
        .collect()
}

fn error_verdict(package: &str, fingerprint: &str, rt: &Runtime, reason: String) -> PackageVerdict {
    PackageVerdict {
        package: package.to_string(),
        outcome: Outcome::Error,
        score: None,
        explanation: String::new(),
        strategy: rt.config.scan.strategy,
        aggregate: PackageAggregate::default(),
        fingerprint: fingerprint.to_string(),
        error: Some(reason),
    }
}

/// Classifies one loaded package.
pub fn scan_record(rt: &Runtime, record: &PackageRecord, source: &str) -> (PackageReport, Vec<AuditRecord>) {
    let mode = rt.config.scan.mode;
    let fingerprint = rt.config.fingerprint();
    let mut analyzed: Vec<Analyzed> = (0..record.files.len()).map(|i| analyze_file(rt, record, i)).collect();
    let mut audit = Vec::new();
    let context = match mode {
        PipelineMode::ZeroShot => Vec::new(),
        PipelineMode::Rag | PipelineMode::Crag => retrieve(rt, record, &analyzed, &mut audit),
    };
    let ast_mode = mode != PipelineMode::ZeroShot && rt.config.crag.mode == ContextMode::AstDescription;
    for file in analyzed.iter_mut() {
        let rel = file.report.verdict.rel_path.clone();
        if !file.readable {
            continue;
        }
        if ast_mode && file.report.parse_error.is_some() {
            file.report.verdict = FileVerdict::failed(&rel, "no syntax tree for ast_description mode");
            continue;
        }
        let snippet = match (&file.description, ast_mode) {
            (Some(d), true) => d.rendered.as_str(),
            _ => file.content.as_str(),
        };
        let messages = match mode {
            PipelineMode::ZeroShot => file_analysis_prompt(&rel, snippet),
            PipelineMode::Rag | PipelineMode::Crag => {
                let p = rag_prompt(&context, &rel, snippet, rt.config.prompt.context_budget);
                file.report.context = Some((p.included, p.dropped));
                p.messages
            }
        };
        let messages = with_few_shot(messages, rt.few_shot.as_deref());
        file.report.verdict = FileVerdict::from_response(&rel, rt.chat.chat(&messages));
        debug!("{}/{}: {}", record.name, rel, file.report.verdict.outcome);
    }
    let mut files: Vec<FileReport> = analyzed.into_iter().map(|a| a.report).collect();
    files.sort_by(|a, b| a.verdict.rel_path.cmp(&b.verdict.rel_path));
    let verdicts: Vec<FileVerdict> = files.iter().map(|f| f.verdict.clone()).collect();
    let verdict = classify_package(
        &record.name,
        &verdicts,
        rt.config.scan.strategy,
        Some(&rt.chat as &dyn ChatModel),
        rt.config.prompt.digest_budget,
        &fingerprint,
    );
    assert_eq!(verdict.aggregate.total(), files.len(), "file count conservation");
    let report = PackageReport {
        package: record.name.clone(),
        source: source.to_string(),
        label: record.label,
        mode,
        context_mode: (mode != PipelineMode::ZeroShot).then_some(rt.config.crag.mode),
        verdict,
        files,
    };
    (report, audit)
}

fn scan_entry(rt: &Runtime, entry: &CorpusEntry) -> (PackageReport, Vec<AuditRecord>) {
    let opts = IngestOptions { workdir: rt.config.ingest.workdir.clone() };
    match load_package(&entry.path, &opts) {
        Ok(mut record) => {
            record.label = entry.label;
            scan_record(rt, &record, &entry.source)
        }
        Err(e) => {
            warn!("{}: {e}", entry.source);
            let name = entry.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| entry.source.clone());
            let mode = rt.config.scan.mode;
            let report = PackageReport {
                verdict: error_verdict(&name, &rt.config.fingerprint(), rt, e.to_string()),
                package: name,
                source: entry.source.clone(),
                label: entry.label,
                mode,
                context_mode: (mode != PipelineMode::ZeroShot).then_some(rt.config.crag.mode),
                files: Vec::new(),
            };
            (report, Vec::new())
        }
    }
}

/// Scans every entry on `rt.config.jobs()` worker threads. Output order is
/// by package name, then source path, whatever the worker count.
pub fn scan_all(rt: &Runtime, entries: &[CorpusEntry]) -> anyhow::Result<ScanOutput> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(rt.config.jobs()).build()?;
    let results: Vec<(PackageReport, Vec<AuditRecord>)> = pool.install(|| entries.par_iter().map(|e| scan_entry(rt, e)).collect());
    let mut out = ScanOutput::default();
    let mut pairs = results;
    pairs.sort_by(|a, b| (&a.0.package, &a.0.source).cmp(&(&b.0.package, &b.0.source)));
    for (report, audit) in pairs {
        out.reports.push(report);
        out.audit.extend(audit);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .with_context(|| format!("writing {}", path.display()))
}

/// `<dir>/<stem>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes the report and, for retrieval modes, the audit next to it.
/// Returns the audit path when one was written.
pub fn write_scan(path: &Path, out: &ScanOutput, mode: PipelineMode) -> anyhow::Result<Option<PathBuf>> {
    write_jsonl(path, &out.reports)?;
    if mode == PipelineMode::ZeroShot {
        return Ok(None);
    }
    let audit_path = sibling(path, "retrieval.jsonl");
    write_jsonl(&audit_path, &out.audit)?;
    Ok(Some(audit_path))
}
