//! Providers, manifest and collections assembled from an [`AppConfig`].

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use pkgscan_core::chat::{ChatError, ChatMessage, ChatModel};
use pkgscan_core::features::SignatureManifest;
use pkgscan_core::retrieval::{EmbedError, Embedder, HashEmbedder, VectorIndex};
use pkgscan_core::verdict::PipelineMode;

use crate::collection::{file_checksum, read_collection};
use crate::config::{AppConfig, EmbeddingKind, ProviderKind};
use crate::gateway::{Gateway, HttpProvider, HttpSettings, MockProvider, MockScript, RequestRecord};

/// The shipped signature manifest, identical to [`SignatureManifest::default`].
pub const DEFAULT_MANIFEST_TOML: &str = include_str!("../data/manifest.toml");

pub fn load_manifest(path: Option<&Path>) -> anyhow::Result<SignatureManifest> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading manifest {}", p.display()))?,
        None => DEFAULT_MANIFEST_TOML.to_string(),
    };
    let m: SignatureManifest = toml::from_str(&text).context("parsing signature manifest")?;
    m.validate()?;
    Ok(m)
}

pub enum ChatHandle {
    Mock(Gateway<MockProvider>),
    Http(Gateway<HttpProvider>),
}

impl ChatHandle {
    pub fn log(&self) -> Vec<RequestRecord> {
        match self {
            ChatHandle::Mock(g) => g.log(),
            ChatHandle::Http(g) => g.log(),
        }
    }

    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        match self {
            ChatHandle::Mock(g) => g.write_log(path),
            ChatHandle::Http(g) => g.write_log(path),
        }
    }
}

impl ChatModel for ChatHandle {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        match self {
            ChatHandle::Mock(g) => g.chat(messages),
            ChatHandle::Http(g) => g.chat(messages),
        }
    }
}

pub enum EmbedHandle {
    Hash(HashEmbedder),
    Http(HttpProvider),
}

impl Embedder for EmbedHandle {
    fn dimension(&self) -> usize {
        match self {
            EmbedHandle::Hash(e) => e.dimension(),
            EmbedHandle::Http(e) => e.dimension(),
        }
    }

    fn max_input(&self) -> usize {
        match self {
            EmbedHandle::Hash(e) => e.max_input(),
            EmbedHandle::Http(e) => e.max_input(),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        match self {
            EmbedHandle::Hash(e) => e.embed(text),
            EmbedHandle::Http(e) => e.embed(text),
        }
    }
}

pub struct Runtime {
    pub config: AppConfig,
    pub manifest: SignatureManifest,
    pub chat: ChatHandle,
    pub embedder: EmbedHandle,
    pub collections: Vec<VectorIndex>,
    /// Collection name to file checksum.
    pub kb_checksums: BTreeMap<String, String>,
    pub few_shot: Option<String>,
}

fn http_settings(cfg: &AppConfig) -> HttpSettings {
    HttpSettings {
        endpoint: cfg.provider.endpoint.clone(),
        model: cfg.provider.model.clone(),
        embedding_model: cfg.provider.embedding_model.clone(),
        api_key_env: cfg.provider.api_key_env.clone(),
        timeout: Duration::from_secs_f64(cfg.provider.timeout_secs),
        temperature: cfg.provider.temperature,
        dimension: cfg.embedding.dimension,
        max_input: cfg.embedding.max_input,
    }
}

pub fn build_chat(cfg: &AppConfig) -> anyhow::Result<ChatHandle> {
    let p = &cfg.provider;
    Ok(match p.kind {
        ProviderKind::Mock => {
            let script = match &p.mock_script {
                Some(path) => MockScript::load(path).with_context(|| format!("loading mock script {}", path.display()))?,
                None => MockScript::with_default("Benign, score 0"),
            };
            ChatHandle::Mock(Gateway::new(MockProvider::new(script), p.max_retries, p.max_parallel, cfg.seed))
        }
        ProviderKind::Openai => ChatHandle::Http(Gateway::new(
            HttpProvider::new(&http_settings(cfg))?,
            p.max_retries,
            p.max_parallel,
            cfg.seed,
        )),
    })
}

pub fn build_embedder(cfg: &AppConfig) -> anyhow::Result<EmbedHandle> {
    let e = &cfg.embedding;
    Ok(match e.kind {
        EmbeddingKind::Hash => EmbedHandle::Hash(HashEmbedder { dimension: e.dimension, seed: e.seed, max_input: e.max_input }),
        EmbeddingKind::Provider => EmbedHandle::Http(HttpProvider::new(&http_settings(cfg))?),
    })
}

impl Runtime {
    pub fn new(config: AppConfig) -> anyhow::Result<Runtime> {
        if config.scan.mode != PipelineMode::ZeroShot && config.kb.collections.is_empty() {
            anyhow::bail!("scan.mode {} needs at least one kb.collections entry", config.scan.mode.as_str());
        }
        let manifest = load_manifest(config.manifest.as_deref())?;
        let chat = build_chat(&config)?;
        let embedder = build_embedder(&config)?;
        let mut collections = Vec::new();
        let mut kb_checksums = BTreeMap::new();
        for path in &config.kb.collections {
            let index = read_collection(path)?;
            if index.dimension() != embedder.dimension() {
                anyhow::bail!(
                    "{}: collection dimension {} differs from embedding.dimension {}",
                    path.display(),
                    index.dimension(),
                    embedder.dimension()
                );
            }
            if kb_checksums.insert(index.name().to_string(), file_checksum(path)?).is_some() {
                anyhow::bail!("{}: duplicate collection name {:?}", path.display(), index.name());
            }
            collections.push(index);
        }
        let few_shot = match &config.prompt.few_shot {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        Ok(Runtime { config, manifest, chat, embedder, collections, kb_checksums, few_shot })
    }

    /// Writes the request log if `provider.request_log` is set.
    pub fn flush_log(&self) -> anyhow::Result<()> {
        if let Some(path) = &self.config.provider.request_log {
            self.chat.write_log(path).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}
