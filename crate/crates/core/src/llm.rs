//! LLM aggregators: one chat-completion endpoint queried at several
//! temperatures, each temperature acting as one L.A. worker `LA:t=<value>`.
//!
//! Every successful response is cached on disk under the SHA-256 of its
//! request, so a rerun against a warm cache needs no network access and
//! reproduces the same answers byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{AnswerRecord, DataError, Dataset, InstanceId, WorkerId, WorkerRole};
use crate::pipeline::la_worker_id;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("cannot render a prompt without answers")]
    NoAnswers,
    #[error("response has no tab separator: {0:?}")]
    NoTab(String),
    #[error("response has an empty translation field: {0:?}")]
    EmptyTarget(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
    #[error("cache I/O error on {path}: {message}")]
    Cache { path: String, message: String },
    #[error("no L.A. answer could be obtained for instance {instance:?}: {reasons}")]
    InstanceFailed { instance: String, reasons: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

const DEFAULT_TEMPLATE: &str = "The following {count} short {target} {sentences} {were} written by {count} non-native {target} {speakers} who translated the same {source} short text from {source} to {target}. Please read each {target} sentence and infer the meaning of the original {source} text, and based on your understanding, provide the appropriate {source} original text and its {target} translation. Only output the text without showing \"{source} original text\" and \"{target} translation\".\n\n{answers}\nOutput format separated by \" and <tab>: \"{source} original text. \" <tab> \"its {target} translation. \"\n\n";

/// Prompt template with `{count}`, `{source}`, `{target}`, `{answers}` and
/// the number-agreement slots `{sentences}`, `{were}`, `{speakers}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    pub template: String,
    pub source_language: String,
    pub target_language: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            template: DEFAULT_TEMPLATE.to_string(),
            source_language: "Japanese".to_string(),
            target_language: "English".to_string(),
        }
    }
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
        "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Renders the prompt for one instance; answers are enumerated `1. …`, one
/// per line, in the order given.
pub fn render_prompt(spec: &PromptSpec, answers: &[AnswerRecord]) -> Result<String, LlmError> {
    if answers.is_empty() {
        return Err(LlmError::NoAnswers);
    }
    let mut listing = String::new();
    for (k, a) in answers.iter().enumerate() {
        let flat = a.text.split_whitespace().collect::<Vec<_>>().join(" ");
        listing.push_str(&format!("{}. {}\n", k + 1, flat));
    }
    let plural = answers.len() != 1;
    Ok(spec
        .template
        .replace("{count}", &count_word(answers.len()))
        .replace("{sentences}", if plural { "sentences" } else { "sentence" })
        .replace("{were}", if plural { "were" } else { "was" })
        .replace("{speakers}", if plural { "speakers" } else { "speaker" })
        .replace("{source}", &spec.source_language)
        .replace("{target}", &spec.target_language)
        .replace("{answers}", &listing))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub source_text: String,
    pub target_text: String,
}

fn strip_field(field: &str) -> String {
    let t = field.trim();
    let t = t.strip_prefix('"').unwrap_or(t);
    let t = t.strip_suffix('"').unwrap_or(t);
    t.trim().to_string()
}

/// Splits on the first tab and strips wrapping quotes and whitespace. Fields
/// without quotes are accepted.
pub fn parse_response(raw: &str) -> Result<ParsedResponse, LlmError> {
    let (source, target) = raw.split_once('\t').ok_or_else(|| LlmError::NoTab(raw.to_string()))?;
    let target_text = strip_field(target);
    if target_text.is_empty() {
        return Err(LlmError::EmptyTarget(raw.to_string()));
    }
    Ok(ParsedResponse {
        source_text: strip_field(source),
        target_text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Chat-completion request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn user(model: &str, temperature: f64, prompt: String) -> Self {
        ChatRequest {
            model: model.to_string(),
            temperature,
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt,
            }],
        }
    }

    /// SHA-256 hex of the serialized request.
    pub fn cache_key(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serialization is infallible");
        hex::encode(Sha256::digest(&body))
    }
}

pub trait ChatProvider: Send + Sync {
    /// Raw text of the first choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

/// OpenAI-style `POST` endpoint; reads `choices[0].message.content` (or
/// `choices[0].text`).
#[derive(Debug, Clone)]
pub struct HttpChatProvider {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send_json(request).map_err(|e| LlmError::Provider(e.to_string()))?;
        let body: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Provider(e.to_string()))?;
        let choice = &body["choices"][0];
        choice["message"]["content"]
            .as_str()
            .or_else(|| choice["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| LlmError::Provider(format!("no text in first choice: {body}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring the prompt must contain.
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    pub reply: String,
}

/// Scripted provider for tests and offline runs.
///
/// Rules are tried in order; without a match, `echo_first` replies with the
/// first enumerated answer of the prompt as the translation. `fail` makes
/// every call error, simulating an unreachable endpoint.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockChatProvider {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub echo_first: bool,
    #[serde(default)]
    pub fail: bool,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl MockChatProvider {
    pub fn echo_first() -> Self {
        MockChatProvider {
            echo_first: true,
            ..Self::default()
        }
    }

    pub fn failing() -> Self {
        MockChatProvider {
            fail: true,
            ..Self::default()
        }
    }

    pub fn from_json_str(json: &str) -> Result<Self, LlmError> {
        serde_json::from_str(json).map_err(|e| LlmError::InvalidConfig(format!("mock script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let raw = fs::read_to_string(path).map_err(|e| LlmError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&raw)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for MockChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail {
            return Err(LlmError::Provider("mock endpoint unreachable".into()));
        }
        let prompt = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        for rule in &self.rules {
            let text_ok = rule.contains.as_deref().is_none_or(|c| prompt.contains(c));
            let temp_ok = rule.temperature.is_none_or(|t| t == request.temperature);
            if text_ok && temp_ok {
                return Ok(rule.reply.clone());
            }
        }
        if self.echo_first {
            if let Some(first) = prompt.lines().find_map(|l| l.strip_prefix("1. ")) {
                return Ok(format!("\"\"\t\"{first}\""));
            }
        }
        Err(LlmError::Provider("no scripted reply for request".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: ChatRequest,
    pub response: String,
    pub timestamp: u64,
}

/// One JSON file per request hash; writes go through a temp file and a rename.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, LlmError> {
        fs::create_dir_all(dir).map_err(|e| LlmError::Cache {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, request: &ChatRequest) -> Option<CacheEntry> {
        let raw = fs::read_to_string(self.path(&request.cache_key())).ok()?;
        let entry: CacheEntry = serde_json::from_str(&raw).ok()?;
        (entry.request == *request).then_some(entry)
    }

    pub fn put(&self, request: &ChatRequest, response: &str) -> Result<(), LlmError> {
        let cache_err = |e: std::io::Error| LlmError::Cache {
            path: self.dir.display().to_string(),
            message: e.to_string(),
        };
        let entry = CacheEntry {
            request: request.clone(),
            response: response.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(cache_err)?;
        serde_json::to_writer_pretty(&mut tmp, &entry).map_err(|e| cache_err(e.into()))?;
        tmp.write_all(b"\n").map_err(cache_err)?;
        tmp.persist(self.path(&request.cache_key()))
            .map_err(|e| cache_err(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEnsembleConfig {
    #[serde(default)]
    pub endpoint: String,
    pub model: String,
    pub temperatures: Vec<f64>,
    /// Extra provider attempts after a transport failure.
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default)]
    pub retry_delay_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub prompt: PromptSpec,
}

fn default_retries() -> usize {
    2
}

fn default_in_flight() -> usize {
    4
}

impl LlmEnsembleConfig {
    pub fn new(model: &str, temperatures: Vec<f64>) -> Self {
        LlmEnsembleConfig {
            endpoint: String::new(),
            model: model.to_string(),
            temperatures,
            retries: default_retries(),
            retry_delay_ms: 0,
            max_in_flight: default_in_flight(),
            cache_dir: None,
            api_key_env: None,
            prompt: PromptSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.temperatures.is_empty() {
            return Err(LlmError::InvalidConfig("temperatures must be non-empty".into()));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
            return Err(LlmError::InvalidConfig(format!("temperature {t} must be finite and >= 0")));
        }
        let ids: std::collections::BTreeSet<WorkerId> = self.worker_ids().into_iter().collect();
        if ids.len() != self.temperatures.len() {
            return Err(LlmError::InvalidConfig("temperatures must be distinct".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::InvalidConfig("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// One worker per temperature, independent of any response.
    pub fn worker_ids(&self) -> Vec<WorkerId> {
        self.temperatures.iter().map(|&t| la_worker_id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFailure {
    pub instance: InstanceId,
    pub worker: WorkerId,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    /// L.A. answers over the input's instance set.
    pub answers: Dataset,
    /// Source-language text returned alongside each answer; unused by aggregation.
    pub sources: BTreeMap<(InstanceId, WorkerId), String>,
    pub failures: Vec<RequestFailure>,
    pub network_calls: usize,
    pub cache_hits: usize,
}

enum Fetched {
    Cached(ParsedResponse),
    Fresh(ParsedResponse),
}

fn fetch(
    provider: &dyn ChatProvider,
    cache: &ResponseCache,
    request: &ChatRequest,
    cfg: &LlmEnsembleConfig,
    calls: &AtomicUsize,
) -> Result<Fetched, LlmError> {
    if let Some(entry) = cache.get(request) {
        if let Ok(parsed) = parse_response(&entry.response) {
            return Ok(Fetched::Cached(parsed));
        }
    }
    let mut transport_failures = 0;
    let mut reparsed = false;
    loop {
        calls.fetch_add(1, Ordering::SeqCst);
        match provider.complete(request) {
            Ok(raw) => match parse_response(&raw) {
                Ok(parsed) => {
                    cache.put(request, &raw)?;
                    return Ok(Fetched::Fresh(parsed));
                }
                Err(e) if reparsed => return Err(e),
                Err(e) => {
                    log::warn!("unparseable response, retrying once: {e}");
                    reparsed = true;
                }
            },
            Err(e) if transport_failures < cfg.retries => {
                transport_failures += 1;
                log::warn!("provider call failed (attempt {transport_failures}): {e}");
                thread::sleep(Duration::from_millis(cfg.retry_delay_ms));
            }
            Err(e) => return Err(e),
        }
    }
}

/// Queries every temperature for every instance of `d`, using the instance's
/// crowd-creator answers (canonical order) as the prompt listing.
///
/// Individual request failures are reported in the outcome; the run fails only
/// when some instance ends up with no L.A. answer at all.
pub fn run_ensemble(
    d: &Dataset,
    cfg: &LlmEnsembleConfig,
    provider: &dyn ChatProvider,
    cache: &ResponseCache,
) -> Result<EnsembleOutcome, LlmError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for id in d.instance_ids() {
        let creators: Vec<AnswerRecord> = d
            .answers_of_instance(id)?
            .iter()
            .filter(|a| a.worker.role() == WorkerRole::CrowdCreator)
            .cloned()
            .collect();
        let prompt = render_prompt(&cfg.prompt, &creators).map_err(|_| LlmError::InstanceFailed {
            instance: id.to_string(),
            reasons: "no crowd-creator answers to aggregate".into(),
        })?;
        for (&t, worker) in cfg.temperatures.iter().zip(cfg.worker_ids()) {
            jobs.push((id.clone(), worker, ChatRequest::user(&cfg.model, t, prompt.clone())));
        }
    }

    let calls = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
    let results: Vec<Result<Fetched, LlmError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, _, req)| fetch(provider, cache, req, cfg, &calls))
            .collect()
    });

    let mut answers = Vec::new();
    let mut sources = BTreeMap::new();
    let mut failures = Vec::new();
    let mut cache_hits = 0;
    for ((instance, worker, _), result) in jobs.into_iter().zip(results) {
        match result {
            Ok(fetched) => {
                let parsed = match fetched {
                    Fetched::Cached(p) => {
                        cache_hits += 1;
                        p
                    }
                    Fetched::Fresh(p) => p,
                };
                sources.insert((instance.clone(), worker.clone()), parsed.source_text);
                answers.push(AnswerRecord {
                    instance,
                    worker,
                    text: parsed.target_text,
                });
            }
            Err(e) => failures.push(RequestFailure {
                instance,
                worker,
                reason: e.to_string(),
            }),
        }
    }

    for id in d.instance_ids() {
        if !answers.iter().any(|a| &a.instance == id) {
            let reasons = failures
                .iter()
                .filter(|f| &f.instance == id)
                .map(|f| format!("{}: {}", f.worker, f.reason))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(LlmError::InstanceFailed {
                instance: id.to_string(),
                reasons,
            });
        }
    }

    Ok(EnsembleOutcome {
        answers: Dataset::new(d.instances().cloned().collect(), answers)?,
        sources,
        failures,
        network_calls: calls.load(Ordering::SeqCst),
        cache_hits,
    })
}
