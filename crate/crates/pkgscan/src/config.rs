//! Application configuration: defaults < file < environment < flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pkgscan_core::crag::{ContextMode, DEFAULT_K, DEFAULT_THRESHOLD};
use pkgscan_core::kb::DEFAULT_SNIPPET_MAX_LEN;
use pkgscan_core::prompts::DEFAULT_CONTEXT_BUDGET;
use pkgscan_core::verdict::{PipelineMode, Strategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::ingest::DEFAULT_SNIPPET_BUDGET;

pub const ENV_PREFIX: &str = "PKGSCAN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub temperature: f64,
    /// Script for the mock provider; replies "Benign, score 0" when unset.
    pub mock_script: Option<PathBuf>,
    /// Request log written after each command, if set.
    pub request_log: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_parallel: 4,
            temperature: 0.0,
            mock_script: None,
            request_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Hash,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dimension: usize,
    pub seed: u64,
    pub max_input: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { kind: EmbeddingKind::Hash, dimension: 1536, seed: 0, max_input: 32 * 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraderKind {
    Overlap,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CragConfig {
    pub k: usize,
    pub threshold: f64,
    pub grader: GraderKind,
    pub mode: ContextMode,
}

impl Default for CragConfig {
    fn default() -> Self {
        CragConfig { k: DEFAULT_K, threshold: DEFAULT_THRESHOLD, grader: GraderKind::Overlap, mode: ContextMode::RawCode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Bytes allowed for the retrieved-knowledge section.
    pub context_budget: usize,
    /// Bytes of file content placed in a file prompt.
    pub file_budget: usize,
    /// Bytes of the per-file digest sent with the package prompt.
    pub digest_budget: usize,
    /// Few-shot examples appended to the developer message.
    pub few_shot: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { context_budget: DEFAULT_CONTEXT_BUDGET, file_budget: 16 * 1024, digest_budget: 4000, few_shot: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub workdir: Option<PathBuf>,
    pub snippet_budget: usize,
    pub snippet_max_len: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { workdir: None, snippet_budget: DEFAULT_SNIPPET_BUDGET, snippet_max_len: DEFAULT_SNIPPET_MAX_LEN }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KbConfig {
    /// Collection files consulted in rag and crag modes.
    pub collections: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub mode: PipelineMode,
    pub strategy: Strategy,
    /// Worker threads; 0 means one per logical CPU.
    pub jobs: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { mode: PipelineMode::ZeroShot, strategy: Strategy::Rule, jobs: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    /// Signature manifest file; the built-in manifest when unset.
    pub manifest: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub embedding: EmbeddingConfig,
    pub crag: CragConfig,
    pub prompt: PromptConfig,
    pub ingest: IngestConfig,
    pub kb: KbConfig,
    pub scan: ScanConfig,
}

/// Parses a flag or environment value as a TOML value, falling back to a
/// plain string.
fn scalar(raw: &str) -> Value {
    let parsed = toml::from_str::<BTreeMap<String, Value>>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v"));
    match parsed {
        Some(v) => v,
        None => Value::String(raw.to_string()),
    }
}

/// Path-valued keys that are absent from the serialized defaults.
const OPTIONAL_PATHS: [&str; 5] = ["manifest", "provider.mock_script", "provider.request_log", "prompt.few_shot", "ingest.workdir"];

fn set_path(root: &mut Value, key: &str, raw: &str) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).with_context(|| format!("empty config key {key:?}"))?;
    let mut node = root;
    for p in parts {
        node = node
            .as_table_mut()
            .context("config root is not a table")?
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node.as_table_mut().with_context(|| format!("{key}: parent is not a section"))?;
    let value = match (table.get(last), scalar(raw)) {
        (Some(Value::String(_)), _) => Value::String(raw.to_string()),
        (None, _) if OPTIONAL_PATHS.contains(&key) => Value::String(raw.to_string()),
        (Some(Value::Array(_)), v) if !v.is_array() => {
            Value::Array(raw.split(',').filter(|s| !s.is_empty()).map(|s| Value::String(s.trim().to_string())).collect())
        }
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Every settable key with its default, as `key = value` lines.
pub fn documented_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        if let Value::Table(t) = v {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if v.is_table() {
                    walk(&key, v, out);
                } else {
                    out.push((key, v.to_string()));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk("", &Value::try_from(AppConfig::default()).expect("defaults serialize"), &mut out);
    for optional in OPTIONAL_PATHS {
        if !out.iter().any(|(k, _)| k == optional) {
            out.push((optional.to_string(), "(unset)".to_string()));
        }
    }
    out.sort();
    out
}

pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (file < PKGSCAN_SECTION__KEY env < --section.key / --set flags):\n");
    for (k, v) in documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

/// Environment variable spelling of a dotted key: `crag.k` -> `PKGSCAN_CRAG__K`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "__").to_ascii_uppercase())
}

impl AppConfig {
    /// Layers the optional file, then `env`, then `overrides` on the defaults.
    pub fn load(
        file: Option<&Path>,
        env: &BTreeMap<String, String>,
        overrides: &[(String, String)],
    ) -> anyhow::Result<AppConfig> {
        let mut tree = Value::try_from(AppConfig::default())?;
        let base_dir = file.and_then(Path::parent).map(Path::to_path_buf);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let parsed: Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut tree, parsed);
        }
        let keys: Vec<String> = documented_keys().into_iter().map(|(k, _)| k).collect();
        for key in &keys {
            if let Some(v) = env.get(&env_name(key)) {
                set_path(&mut tree, key, v)?;
            }
        }
        for (name, _) in env {
            if name.starts_with(ENV_PREFIX) && !keys.iter().any(|k| &env_name(k) == name) && name != "PKGSCAN_LOG" {
                bail!("unknown configuration variable {name}");
            }
        }
        for (key, v) in overrides {
            if !keys.contains(key) {
                bail!("unknown configuration key {key:?}");
            }
            set_path(&mut tree, key, v)?;
        }
        let mut cfg: AppConfig = tree.try_into().context("invalid configuration")?;
        if let Some(dir) = base_dir {
            cfg.resolve_paths(&dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes file-relative paths from a config file absolute to its directory.
    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.manifest.iter_mut().for_each(fix);
        self.provider.mock_script.iter_mut().for_each(fix);
        self.prompt.few_shot.iter_mut().for_each(fix);
        self.kb.collections.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.provider.timeout_secs > 0.0) {
            bail!("provider.timeout_secs must be positive");
        }
        if self.provider.max_parallel == 0 {
            bail!("provider.max_parallel must be at least 1");
        }
        if self.crag.k == 0 {
            bail!("crag.k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crag.threshold) {
            bail!("crag.threshold must lie in [0, 1]");
        }
        if self.embedding.dimension == 0 {
            bail!("embedding.dimension must be positive");
        }
        if self.ingest.snippet_budget == 0 || self.ingest.snippet_max_len == 0 {
            bail!("ingest budgets must be positive");
        }
        let mut paths: Vec<(&str, &PathBuf)> = Vec::new();
        paths.extend(self.manifest.iter().map(|p| ("manifest", p)));
        paths.extend(self.provider.mock_script.iter().map(|p| ("provider.mock_script", p)));
        paths.extend(self.prompt.few_shot.iter().map(|p| ("prompt.few_shot", p)));
        paths.extend(self.kb.collections.iter().map(|p| ("kb.collections", p)));
        for (key, p) in paths {
            if !p.exists() {
                bail!("{key}: {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// The configuration minus settings that cannot change results
    /// (worker count, request log and extraction locations).
    pub fn canonical(&self) -> AppConfig {
        let mut c = self.clone();
        c.scan.jobs = 0;
        c.provider.request_log = None;
        c.ingest.workdir = None;
        c
    }

    /// [`AppConfig::canonical`] with every referenced file replaced by the
    /// digest of its content, so the result does not depend on location.
    pub fn portable(&self) -> AppConfig {
        let mut c = self.canonical();
        let digest = |p: &mut PathBuf| {
            if let Ok(bytes) = std::fs::read(&*p) {
                *p = PathBuf::from(format!("sha256:{}", hex::encode(Sha256::digest(&bytes))));
            }
        };
        c.manifest.iter_mut().for_each(digest);
        c.provider.mock_script.iter_mut().for_each(digest);
        c.prompt.few_shot.iter_mut().for_each(digest);
        c.kb.collections.iter_mut().for_each(digest);
        c
    }

    /// Short hash of the portable configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&self.portable()).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn jobs(&self) -> usize {
        match self.scan.jobs {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            n => n,
        }
    }
}
