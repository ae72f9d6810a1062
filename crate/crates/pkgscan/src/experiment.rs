//! Labeled-corpus experiments and metric reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use pkgscan_core::crag::ContextMode;
use pkgscan_core::metrics::{confusion, MetricsReport};
use pkgscan_core::verdict::{PipelineMode, Strategy};
use pkgscan_core::{Label, Outcome};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;
use crate::corpus::CorpusEntry;
use crate::pipeline::{scan_all, ScanOutput};
use crate::runtime::Runtime;

/// One scored package of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub package: String,
    pub source: String,
    pub label: Label,
    pub prediction: Outcome,
    pub score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PipelineMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_mode: Option<ContextMode>,
    /// Collection name to file checksum.
    #[serde(default)]
    pub kb_checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<AppConfig>,
}

/// Default experiment name: mode, context mode for crag, and strategy.
pub fn experiment_name(cfg: &AppConfig) -> String {
    let mode = cfg.scan.mode;
    match mode {
        PipelineMode::Crag => {
            let ctx = match cfg.crag.mode {
                ContextMode::RawCode => "raw_code",
                ContextMode::AstDescription => "ast_description",
            };
            format!("{}/{}/{}", mode.as_str(), ctx, cfg.scan.strategy.as_str())
        }
        _ => format!("{}/{}", mode.as_str(), cfg.scan.strategy.as_str()),
    }
}

/// Scans a labeled corpus and scores the package verdicts.
pub fn run_experiment(
    rt: &Runtime,
    entries: &[CorpusEntry],
    name: &str,
) -> anyhow::Result<(ExperimentReport, Vec<SampleRecord>, ScanOutput)> {
    if entries.is_empty() {
        bail!("empty corpus");
    }
    if let Some(e) = entries.iter().find(|e| e.label.is_none()) {
        bail!("{}: missing label", e.source);
    }
    let mut order = entries.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rt.config.seed));
    let scan = scan_all(rt, &order)?;
    let samples: Vec<SampleRecord> = scan
        .reports
        .iter()
        .map(|r| SampleRecord {
            package: r.package.clone(),
            source: r.source.clone(),
            label: r.label.expect("labels checked"),
            prediction: r.verdict.outcome,
            score: r.verdict.score,
        })
        .collect();
    let preds: Vec<Outcome> = samples.iter().map(|s| s.prediction).collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&preds, &labels)?;
    let cfg = &rt.config;
    let report = ExperimentReport {
        metrics: MetricsReport::new(name, cfg.fingerprint(), cfg.seed, cm),
        mode: Some(cfg.scan.mode),
        strategy: Some(cfg.scan.strategy),
        context_mode: (cfg.scan.mode != PipelineMode::ZeroShot).then_some(cfg.crag.mode),
        kb_checksums: rt.kb_checksums.clone(),
        config: Some(cfg.portable()),
    };
    Ok((report, samples, scan))
}

#[derive(Deserialize)]
struct PredictionRow {
    package: String,
    label: String,
    prediction: String,
}

/// Scores an externally produced `package,label,prediction` CSV.
pub fn evaluate_predictions(path: &Path, seed: u64) -> anyhow::Result<(ExperimentReport, Vec<SampleRecord>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        let label = Label::parse(&row.label)
            .with_context(|| format!("{}: row {}: bad label {:?}", path.display(), i + 2, row.label))?;
        let prediction = match Label::parse(&row.prediction) {
            Some(Label::Malicious) => Outcome::Malicious,
            Some(Label::Benign) => Outcome::Benign,
            None => row.prediction.parse().map_err(|_| {
                anyhow::anyhow!("{}: row {}: bad prediction {:?}", path.display(), i + 2, row.prediction)
            })?,
        };
        samples.push(SampleRecord { package: row.package.clone(), source: row.package, label, prediction, score: None });
    }
    if samples.is_empty() {
        bail!("{}: no predictions", path.display());
    }
    samples.sort_by(|a, b| a.package.cmp(&b.package));
    let preds: Vec<Outcome> = samples.iter().map(|s| s.prediction).collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&preds, &labels)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let fingerprint = hex::encode(&Sha256::digest(&bytes)[..8]);
    let report = ExperimentReport {
        metrics: MetricsReport::new(name, fingerprint, seed, cm),
        mode: None,
        strategy: None,
        context_mode: None,
        kb_checksums: BTreeMap::new(),
        config: None,
    };
    Ok((report, samples))
}

/// Reads an experiment report, or a bare metrics report.
pub fn read_report(path: &Path) -> anyhow::Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<ExperimentReport>(&text) {
        return Ok(r.metrics);
    }
    serde_json::from_str::<MetricsReport>(&text).with_context(|| format!("{}: not a metrics report", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ft.csv");
        fs::write(&path, "package,label,prediction\nb,0,benign\na,1,1\nc,1,error\nd,0,malicious\n").unwrap();
        let (report, samples) = evaluate_predictions(&path, 3).unwrap();
        assert_eq!(samples[0].package, "a");
        let cm = report.metrics.confusion;
        assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_, cm.errors), (1, 1, 1, 0, 1));
        assert_eq!(report.metrics.config, "ft");
        write_json(&dir.path().join("r.json"), &report).unwrap();
        assert_eq!(read_report(&dir.path().join("r.json")).unwrap(), report.metrics);
    }
}
