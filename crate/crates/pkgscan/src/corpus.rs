//! Labeled package lists.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pkgscan_core::Label;
use serde::Deserialize;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    /// Path as written in the manifest (or on the command line).
    pub source: String,
    pub path: PathBuf,
    pub label: Option<Label>,
}

#[derive(Deserialize)]
struct Row {
    path: String,
    #[serde(default)]
    label: Option<String>,
}

/// Reads a `path,label` manifest; paths are relative to its directory.
pub fn read_manifest(csv_path: &Path) -> anyhow::Result<Vec<CorpusEntry>> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", csv_path.display(), i + 2))?;
        let label = match row.label.as_deref().map(str::trim).filter(|l| !l.is_empty()) {
            None => None,
            Some(l) => Some(Label::parse(l).with_context(|| format!("{}: row {}: bad label {l:?}", csv_path.display(), i + 2))?),
        };
        out.push(CorpusEntry { path: base.join(&row.path), source: row.path, label });
    }
    Ok(out)
}

/// A corpus directory (holding `manifest.csv`), a manifest file, or a single
/// package path.
pub fn resolve_target(path: &Path) -> anyhow::Result<Vec<CorpusEntry>> {
    if !path.exists() {
        bail!("{}: no such file or directory", path.display());
    }
    if path.is_dir() && path.join(MANIFEST_FILE).is_file() {
        return read_manifest(&path.join(MANIFEST_FILE));
    }
    if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_manifest(path);
    }
    Ok(vec![CorpusEntry { source: path.display().to_string(), path: path.to_path_buf(), label: None }])
}
