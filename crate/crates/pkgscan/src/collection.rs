//! Collection files and knowledge-source readers.
//!
//! A collection file is one header line followed by one document per line,
//! all JSON:
//!
//! ```text
//! {"collection":"yara","source":"yara","dimension":1536,"count":2}
//! {"id":"r1","source":"yara","title":"r1","body":"...","metadata":{...},"embedding":[...]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pkgscan_core::kb::{AdvisoryRecord, SnippetRow};
use pkgscan_core::retrieval::{KnowledgeDocument, Source, VectorIndex};
use pkgscan_core::Label;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionHeader {
    pub collection: String,
    pub source: Option<Source>,
    pub dimension: usize,
    pub count: usize,
}

pub fn write_collection(path: &Path, index: &VectorIndex, source: Option<Source>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let header = CollectionHeader {
        collection: index.name().to_string(),
        source,
        dimension: index.dimension(),
        count: index.len(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for doc in index.documents() {
        serde_json::to_writer(&mut out, doc)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_collection(path: &Path) -> anyhow::Result<VectorIndex> {
    let f = fs::File::open(path).with_context(|| format!("opening collection {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header: CollectionHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).with_context(|| format!("{}: bad header", path.display()))?,
        None => bail!("{}: empty collection file", path.display()),
    };
    let mut index = VectorIndex::new(header.collection.clone(), header.dimension);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: KnowledgeDocument =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: bad document", path.display(), i + 2))?;
        index.insert(doc).with_context(|| format!("{}:{}", path.display(), i + 2))?;
    }
    if index.len() != header.count {
        bail!("{}: header declares {} documents, found {}", path.display(), header.count, index.len());
    }
    Ok(index)
}

/// SHA-256 of a collection file, hex encoded.
pub fn file_checksum(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Line-delimited advisory records.
pub fn read_advisories(path: &Path) -> anyhow::Result<Vec<AdvisoryRecord>> {
    jsonl(path)
}

/// Snippets from a line-delimited file of `{package, label, text}` records,
/// or from a directory holding one file per package.
pub fn read_snippets(path: &Path) -> anyhow::Result<Vec<SnippetRow>> {
    if !path.is_dir() {
        return jsonl(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p)?;
            Ok(SnippetRow {
                package: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                label: Label::Malicious,
                text: String::from_utf8_lossy(&bytes).into_owned(),
            })
        })
        .collect()
}

/// YARA source from a file, or every `.yar`/`.yara` file of a directory in
/// name order.
pub fn read_yara_sources(path: &Path) -> anyhow::Result<Vec<(PathBuf, String)>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "yar" || e == "yara"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|p| {
            let text = String::from_utf8_lossy(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?).into_owned();
            Ok((p, text))
        })
        .collect()
}
