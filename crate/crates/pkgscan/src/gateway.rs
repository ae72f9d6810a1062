//! Chat and embedding providers: retrying gateway, HTTP transport and mock.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use pkgscan_core::chat::{flatten, prompt_hash, ChatError, ChatMessage, ChatModel, Role};
use pkgscan_core::retrieval::{check_input, EmbedError, Embedder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BACKOFF_BASE: Duration = Duration::from_millis(500);
pub const BACKOFF_FACTOR: u32 = 2;

pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only advances when slept on; records every sleep.
#[derive(Default)]
pub struct ManualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl ManualClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }
    fn sleep(&self, d: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += d;
        s.1.push(d);
    }
}

/// Full-jitter delay before retry number `retry` (0-based).
pub fn backoff_delay(retry: u32, rng: &mut impl Rng) -> Duration {
    let cap = BACKOFF_BASE.as_secs_f64() * f64::from(BACKOFF_FACTOR).powi(retry.min(30) as i32);
    Duration::from_secs_f64(rng.gen_range(0.0..=cap))
}

/// One provider round trip, without retries.
pub trait Transport: Send + Sync {
    fn send(&self, messages: &[ChatMessage]) -> Result<String, ChatError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub prompt_hash: String,
    pub attempt: u32,
    pub latency_ms: u64,
    pub outcome: String,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Retries transient failures with full-jitter exponential backoff, bounds
/// in-flight requests and logs every attempt.
pub struct Gateway<T> {
    transport: T,
    max_retries: u32,
    slots: Semaphore,
    clock: Box<dyn Clock>,
    rng: Mutex<ChaCha8Rng>,
    log: Mutex<Vec<RequestRecord>>,
}

impl<T: Transport> Gateway<T> {
    pub fn new(transport: T, max_retries: u32, max_parallel: usize, seed: u64) -> Self {
        Self::with_clock(transport, max_retries, max_parallel, seed, Box::new(SystemClock::default()))
    }

    pub fn with_clock(transport: T, max_retries: u32, max_parallel: usize, seed: u64, clock: Box<dyn Clock>) -> Self {
        Gateway {
            transport,
            max_retries,
            slots: Semaphore { free: Mutex::new(max_parallel.max(1)), cv: Condvar::new() },
            clock,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn log(&self) -> Vec<RequestRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for r in self.log.lock().unwrap().iter() {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

impl<T: Transport> ChatModel for Gateway<T> {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        if messages.is_empty() {
            return Err(ChatError::EmptyConversation);
        }
        let hash = prompt_hash(messages);
        let mut attempt = 0;
        loop {
            let started = self.clock.now();
            let result = {
                let _slot = self.slots.acquire();
                self.transport.send(messages)
            };
            let latency = self.clock.now().saturating_sub(started);
            let outcome = match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => e.to_string(),
            };
            log::debug!("chat {hash} attempt {attempt}: {outcome}");
            self.log.lock().unwrap().push(RequestRecord {
                prompt_hash: hash.clone(),
                attempt,
                latency_ms: latency.as_millis() as u64,
                outcome,
            });
            match result {
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    let delay = backoff_delay(attempt, &mut *self.rng.lock().unwrap());
                    self.clock.sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Timeout,
    RateLimited,
    Transport,
    Rejection,
}

impl Failure {
    fn error(self) -> ChatError {
        match self {
            Failure::Timeout => ChatError::Timeout,
            Failure::RateLimited => ChatError::RateLimited,
            Failure::Transport => ChatError::Transport("injected failure".into()),
            Failure::Rejection => ChatError::ProviderRejection("injected rejection".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring searched in the flattened prompt.
    pub contains: String,
    pub response: String,
}

/// Scripted behavior of [`MockProvider`]. Lookup order: prompt hash, then
/// the first matching substring rule, then the default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub by_hash: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Failures returned, in order, by the first calls.
    #[serde(default)]
    pub failures: Vec<Failure>,
    /// Failure returned by every call once `failures` is used up.
    #[serde(default)]
    pub always_fail: Option<Failure>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn with_default(response: impl Into<String>) -> Self {
        MockScript { default: Some(response.into()), ..Default::default() }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    fn lookup(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let hash = prompt_hash(messages);
        if let Some(r) = self.by_hash.get(&hash) {
            return Ok(r.clone());
        }
        let text = flatten(messages);
        if let Some(rule) = self.rules.iter().find(|r| text.contains(&r.contains)) {
            return Ok(rule.response.clone());
        }
        self.default.clone().ok_or(ChatError::UnscriptedPrompt(hash))
    }
}

/// Deterministic offline provider: identical prompts get identical replies.
pub struct MockProvider {
    script: MockScript,
    pending: Mutex<VecDeque<Failure>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        MockProvider {
            pending: Mutex::new(script.failures.iter().copied().collect()),
            script,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Transport for MockProvider {
    fn send(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        let injected = self.pending.lock().unwrap().pop_front().or(self.script.always_fail);
        let result = match injected {
            Some(f) => Err(f.error()),
            None => self.script.lookup(messages),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// OpenAI-compatible chat-completions and embeddings over HTTPS.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    embedding_model: String,
    api_key: Option<String>,
    temperature: f64,
    dimension: usize,
    max_input: usize,
}

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    pub api_key_env: String,
    pub timeout: Duration,
    pub temperature: f64,
    pub dimension: usize,
    pub max_input: usize,
}

impl HttpProvider {
    pub fn new(s: &HttpSettings) -> anyhow::Result<Self> {
        let client = reqwest::blocking::Client::builder().timeout(s.timeout).build()?;
        Ok(HttpProvider {
            client,
            endpoint: s.endpoint.trim_end_matches('/').to_string(),
            model: s.model.clone(),
            embedding_model: s.embedding_model.clone(),
            api_key: std::env::var(&s.api_key_env).ok().filter(|k| !k.is_empty()),
            temperature: s.temperature,
            dimension: s.dimension,
            max_input: s.max_input,
        })
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, ChatError> {
        let mut req = self.client.post(format!("{}/{path}", self.endpoint)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ChatError::Timeout
            } else {
                ChatError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(ChatError::RateLimited);
        }
        if status.is_server_error() {
            return Err(ChatError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ChatError::ProviderRejection(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        resp.json().map_err(|e| ChatError::Transport(e.to_string()))
    }
}

/// Chat-completions request body; the developer role travels as `system`.
pub fn chat_request_body(model: &str, temperature: f64, messages: &[ChatMessage]) -> serde_json::Value {
    let msgs: Vec<serde_json::Value> = messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::Developer => "system",
                Role::User => "user",
            };
            serde_json::json!({ "role": role, "content": m.content })
        })
        .collect();
    serde_json::json!({ "model": model, "temperature": temperature, "messages": msgs })
}

impl Transport for HttpProvider {
    fn send(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let v = self.post("chat/completions", &chat_request_body(&self.model, self.temperature, messages))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ChatError::Transport("response without choices[0].message.content".into()))
    }
}

impl Embedder for HttpProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_input(&self) -> usize {
        self.max_input
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        check_input(text, self.max_input)?;
        let body = serde_json::json!({ "model": self.embedding_model, "input": text });
        let v = self.post("embeddings", &body).map_err(|e| EmbedError::Provider(e.to_string()))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| EmbedError::Provider("response without data[0].embedding".into()))?;
        let out: Vec<f64> = arr.iter().filter_map(|x| x.as_f64()).collect();
        if out.len() != self.dimension {
            return Err(EmbedError::Provider(format!("expected {} dimensions, got {}", self.dimension, out.len())));
        }
        Ok(out)
    }
}
