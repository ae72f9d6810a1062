//! Loading packages from directories and archives.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use pkgscan_core::Label;
use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use walkdir::WalkDir;

pub const DEFAULT_SNIPPET_BUDGET: usize = 300;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{0}: no such file or directory")]
    NotFound(PathBuf),
    #[error("{path}: unreadable archive: {reason}")]
    UnreadableArchive { path: PathBuf, reason: String },
    #[error("{archive}: member {member:?} escapes the package root")]
    PathTraversal { archive: PathBuf, member: String },
    #[error("{0}: package has no regular files")]
    EmptyPackage(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Where archives are extracted; the system temp dir when unset.
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// POSIX-style path relative to the package root.
    pub rel_path: String,
    pub bytes: u64,
    pub is_python: bool,
    #[serde(skip)]
    pub abs_path: PathBuf,
}

impl FileEntry {
    pub fn read_bytes(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.abs_path)
    }

    /// UTF-8 content with invalid sequences replaced.
    pub fn content(&self) -> io::Result<String> {
        Ok(String::from_utf8_lossy(&self.read_bytes()?).into_owned())
    }
}

#[derive(Debug, Clone)]
pub struct PackageRecord {
    pub name: String,
    pub root: PathBuf,
    pub files: Vec<FileEntry>,
    pub label: Option<Label>,
    // Keeps an extraction directory alive for as long as the record.
    _sandbox: Option<Arc<TempDir>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Container {
    Dir,
    TarGz,
    Zip,
}

const ARCHIVE_SUFFIXES: [(&str, Container); 4] =
    [(".tar.gz", Container::TarGz), (".tgz", Container::TarGz), (".zip", Container::Zip), (".whl", Container::Zip)];

fn container_of(path: &Path) -> Option<(Container, String)> {
    let file_name = path.file_name()?.to_string_lossy().into_owned();
    if path.is_dir() {
        return Some((Container::Dir, file_name));
    }
    let lower = file_name.to_ascii_lowercase();
    ARCHIVE_SUFFIXES
        .iter()
        .find(|(suffix, _)| lower.ends_with(suffix))
        .map(|(suffix, kind)| (*kind, file_name[..file_name.len() - suffix.len()].to_string()))
}

/// True for paths [`load_package`] accepts.
pub fn is_package_path(path: &Path) -> bool {
    container_of(path).is_some()
}

/// Relative path of an archive member, or `None` if it would leave the root.
pub fn safe_member_path(name: &str) -> Option<PathBuf> {
    let normalized = name.replace('\\', "/");
    if normalized.starts_with('/') || normalized.contains('\0') {
        return None;
    }
    let mut out = PathBuf::new();
    for c in Path::new(&normalized).components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

fn write_member(dest: &Path, rel: &Path, reader: &mut impl Read) -> Result<(), IngestError> {
    let target = dest.join(rel);
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut out = File::create(&target).map_err(io_err(&target))?;
    io::copy(reader, &mut out).map_err(io_err(&target))?;
    Ok(())
}

fn extract_tar_gz(archive: &Path, dest: &Path) -> Result<(), IngestError> {
    let unreadable = |e: io::Error| IngestError::UnreadableArchive { path: archive.to_path_buf(), reason: e.to_string() };
    let file = File::open(archive).map_err(io_err(archive))?;
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(file));
    for entry in tar.entries().map_err(unreadable)? {
        let mut entry = entry.map_err(unreadable)?;
        let raw = String::from_utf8_lossy(&entry.path_bytes()).into_owned();
        let rel = safe_member_path(&raw)
            .ok_or_else(|| IngestError::PathTraversal { archive: archive.to_path_buf(), member: raw.clone() })?;
        let kind = entry.header().entry_type();
        if kind.is_dir() {
            fs::create_dir_all(dest.join(&rel)).map_err(io_err(dest))?;
        } else if kind.is_file() && !rel.as_os_str().is_empty() {
            write_member(dest, &rel, &mut entry)?;
        }
        // links and special members are not materialized
    }
    Ok(())
}

fn extract_zip(archive: &Path, dest: &Path) -> Result<(), IngestError> {
    let unreadable = |e: zip::result::ZipError| IngestError::UnreadableArchive { path: archive.to_path_buf(), reason: e.to_string() };
    let file = File::open(archive).map_err(io_err(archive))?;
    let mut zip = zip::ZipArchive::new(file).map_err(unreadable)?;
    for i in 0..zip.len() {
        let mut member = zip.by_index(i).map_err(unreadable)?;
        let raw = member.name().map_err(unreadable)?.into_owned();
        let rel = safe_member_path(&raw)
            .ok_or_else(|| IngestError::PathTraversal { archive: archive.to_path_buf(), member: raw.clone() })?;
        if member.is_dir() {
            fs::create_dir_all(dest.join(&rel)).map_err(io_err(dest))?;
        } else if member.is_file() && !rel.as_os_str().is_empty() {
            write_member(dest, &rel, &mut member)?;
        }
    }
    Ok(())
}

fn enumerate(root: &Path) -> Result<Vec<FileEntry>, IngestError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(|e| IngestError::Io { path: root.to_path_buf(), source: e.into() })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let rel_path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let bytes = entry.metadata().map_err(|e| IngestError::Io { path: entry.path().to_path_buf(), source: e.into() })?.len();
        files.push(FileEntry {
            is_python: rel_path.ends_with(".py"),
            rel_path,
            bytes,
            abs_path: entry.path().to_path_buf(),
        });
    }
    files.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    Ok(files)
}

/// A lone top-level directory inside an extracted archive becomes the root.
fn single_top_dir(dir: &Path) -> Result<Option<PathBuf>, IngestError> {
    let entries: Vec<_> = fs::read_dir(dir).map_err(io_err(dir))?.collect::<Result<_, _>>().map_err(io_err(dir))?;
    match entries.as_slice() {
        [only] if only.file_type().map_err(io_err(dir))?.is_dir() => Ok(Some(only.path())),
        _ => Ok(None),
    }
}

fn wheel_name(stem: &str) -> String {
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() >= 5 {
        parts[..2].join("-")
    } else {
        stem.to_string()
    }
}

pub fn load_package(path: &Path, opts: &IngestOptions) -> Result<PackageRecord, IngestError> {
    if !path.exists() {
        return Err(IngestError::NotFound(path.to_path_buf()));
    }
    let (kind, stem) = container_of(path).ok_or_else(|| IngestError::UnreadableArchive {
        path: path.to_path_buf(),
        reason: "not a directory, .tar.gz, .zip or .whl".into(),
    })?;
    let (name, root, sandbox) = match kind {
        Container::Dir => (stem, path.to_path_buf(), None),
        Container::TarGz | Container::Zip => {
            let base = opts.workdir.clone().unwrap_or_else(std::env::temp_dir);
            fs::create_dir_all(&base).map_err(io_err(&base))?;
            let sandbox = tempfile::Builder::new().prefix("pkgscan-").tempdir_in(&base).map_err(io_err(&base))?;
            if kind == Container::TarGz {
                extract_tar_gz(path, sandbox.path())?;
            } else {
                extract_zip(path, sandbox.path())?;
            }
            let is_wheel = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("whl"));
            let (name, root) = match single_top_dir(sandbox.path())? {
                Some(top) if !is_wheel => (top.file_name().unwrap_or_default().to_string_lossy().into_owned(), top),
                _ => (if is_wheel { wheel_name(&stem) } else { stem }, sandbox.path().to_path_buf()),
            };
            (name, root, Some(Arc::new(sandbox)))
        }
    };
    let files = enumerate(&root)?;
    if files.is_empty() {
        return Err(IngestError::EmptyPackage(path.to_path_buf()));
    }
    let name = if name.is_empty() || name.contains(['/', '\\']) { "package".to_string() } else { name };
    Ok(PackageRecord { name, root, files, label: None, _sandbox: sandbox })
}

/// Longest prefix of `bytes` not exceeding `budget` that does not end inside
/// a UTF-8 multi-byte sequence.
pub fn utf8_prefix(bytes: &[u8], budget: usize) -> &[u8] {
    if bytes.len() <= budget {
        return bytes;
    }
    let mut end = budget;
    while end > 0 && (bytes[end] & 0b1100_0000) == 0b1000_0000 {
        end -= 1;
    }
    &bytes[..end]
}

/// First `budget` bytes of the lexicographically first `setup.py`.
pub fn extract_setup_snippet(record: &PackageRecord, budget: usize) -> io::Result<Option<String>> {
    let Some(setup) = record.files.iter().find(|f| f.rel_path == "setup.py" || f.rel_path.ends_with("/setup.py")) else {
        return Ok(None);
    };
    let bytes = setup.read_bytes()?;
    Ok(Some(String::from_utf8_lossy(utf8_prefix(&bytes, budget)).into_owned()))
}
