//! Fine-tuning dataset export.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use log::warn;
use pkgscan_core::dataset::{build_dataset, SplitManifest, SplitRatios};
use pkgscan_core::describe::{package_description, render_description, DatasetRow, Granularity, TextualDescription};
use pkgscan_core::features::SignatureManifest;
use rayon::prelude::*;

use crate::corpus::CorpusEntry;
use crate::ingest::{load_package, IngestOptions};
use crate::pyfeatures::source_features;

/// Descriptions of every parseable Python file of one package.
pub fn describe_package(
    entry: &CorpusEntry,
    manifest: &SignatureManifest,
    opts: &IngestOptions,
) -> anyhow::Result<Vec<TextualDescription>> {
    let record = load_package(&entry.path, opts)?;
    let mut out = Vec::new();
    for file in record.files.iter().filter(|f| f.is_python) {
        let source = file.content().with_context(|| format!("reading {}", file.abs_path.display()))?;
        match source_features(&source, &file.rel_path, manifest) {
            Ok(fv) => out.push(render_description(&record.name, &file.rel_path, &fv)),
            Err(e) => warn!("{}: skipped, {e}", entry.source),
        }
    }
    Ok(out)
}

/// Dataset rows for labeled entries; unlabeled or unreadable packages are
/// skipped with a warning.
pub fn dataset_rows(
    entries: &[CorpusEntry],
    manifest: &SignatureManifest,
    opts: &IngestOptions,
    granularity: Granularity,
) -> Vec<DatasetRow> {
    entries
        .par_iter()
        .flat_map_iter(|entry| {
            let Some(label) = entry.label else {
                warn!("{}: no label, skipped", entry.source);
                return Vec::new();
            };
            let descriptions = match describe_package(entry, manifest, opts) {
                Ok(d) if !d.is_empty() => d,
                Ok(_) => {
                    warn!("{}: no Python sources, skipped", entry.source);
                    return Vec::new();
                }
                Err(e) => {
                    warn!("{}: {e:#}", entry.source);
                    return Vec::new();
                }
            };
            match granularity {
                Granularity::Package => vec![DatasetRow { description: package_description(&descriptions), label }],
                Granularity::File => {
                    descriptions.into_iter().map(|d| DatasetRow { description: d.rendered, label }).collect()
                }
            }
        })
        .collect()
}

fn write_split(path: &Path, rows: &[DatasetRow]) -> anyhow::Result<()> {
    let mut buf = b"description,label\n".to_vec();
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .quote_style(csv::QuoteStyle::NonNumeric)
            .from_writer(&mut buf);
        for row in rows {
            w.write_record([row.description.as_str(), &row.label.to_string()])?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `manifest.json` to `out`.
pub fn write_dataset(
    out: &Path,
    rows: Vec<DatasetRow>,
    ratios: SplitRatios,
    seed: u64,
    granularity: Granularity,
) -> anyhow::Result<SplitManifest> {
    if rows.is_empty() {
        bail!("no labeled rows to split");
    }
    let split = build_dataset(rows, ratios, seed, granularity)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_split(&out.join("train.csv"), &split.train)?;
    write_split(&out.join("val.csv"), &split.val)?;
    write_split(&out.join("test.csv"), &split.test)?;
    let mut manifest = serde_json::to_string_pretty(&split.manifest)?;
    manifest.push('\n');
    fs::write(out.join("manifest.json"), manifest)?;
    Ok(split.manifest)
}
