//! Completion backends: an OpenAI-compatible HTTP client, a scripted mock,
//! and capture/replay wrappers for offline reruns.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Task};
use crate::parsing::{extract_test_input, PredictionSet};
use crate::prompting::target_lines;

pub const API_KEY_ENV: &str = "CICL_API_KEY";
pub const BASE_URL_ENV: &str = "CICL_BASE_URL";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("request failed after {attempts} attempt(s), last status {last_status:?}: {message}")]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("backend returned status {status}: {message}")]
    Http { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("prompt {0} not found in capture log")]
    NotCaptured(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("capture log {path}: {source}")]
    Capture {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scripted failure: {0}")]
    Scripted(String),
}

impl GatewayError {
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Auth { status } | GatewayError::Http { status, .. } => *status,
            GatewayError::Exhausted { last_status, .. } => last_status.unwrap_or(0),
            _ => 0,
        }
    }
}

/// Decoding parameters sent with every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub num_beams: usize,
    pub do_sample: bool,
    pub seed: u64,
    pub stop: Vec<String>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.3,
            top_p: 0.7,
            max_new_tokens: 512,
            num_beams: 1,
            do_sample: true,
            seed: 0,
            stop: vec!["\ndef ".to_string()],
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidParams(m.to_string()));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if self.num_beams == 0 {
            return bad("num_beams must be positive");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub model_tag: String,
    pub latency_ms: u64,
    pub usage: Option<Usage>,
    /// Attempts beyond the first.
    pub retries: u32,
}

pub trait LlmGateway: Send + Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError>;
}

impl<G: LlmGateway + ?Sized> LlmGateway for std::sync::Arc<G> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

impl<G: LlmGateway + ?Sized> LlmGateway for Box<G> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

impl<G: LlmGateway + ?Sized> LlmGateway for &G {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Counting semaphore bounding simultaneous requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            current: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.max {
            current = self.cv.wait(current).unwrap();
        }
        *current += 1;
        InFlightGuard { limiter: self }
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.current.lock().unwrap() -= 1;
        self.limiter.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    /// Wrap the prompt in a chat request for chat-only backends.
    pub chat: bool,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000".into(),
            model: "codellama-7b".into(),
            api_key: None,
            max_attempts: 4,
            initial_backoff_ms: 500,
            timeout_secs: 120,
            chat: false,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl HttpConfig {
    /// Applies `CICL_BASE_URL` and `CICL_API_KEY` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.trim().is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.trim().is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }

    fn endpoint(&self, leaf: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/{leaf}")
        } else {
            format!("{base}/v1/{leaf}")
        }
    }
}

const CHAT_SYSTEM_PROMPT: &str =
    "Continue the Python code exactly where it stops. Reply with code only.";

/// Blocking client for `/v1/completions` (or `/v1/chat/completions`).
pub struct HttpGateway {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

impl HttpGateway {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let limiter = InFlightLimiter::new(config.max_in_flight);
        Ok(HttpGateway {
            config,
            client,
            limiter,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str, params: &SamplingParams) -> Value {
        let temperature = if params.do_sample { params.temperature } else { 0.0 };
        let mut body = json!({
            "model": self.config.model,
            "temperature": temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
            "stop": params.stop,
            "seed": params.seed,
        });
        if self.config.chat {
            body["messages"] = json!([
                {"role": "system", "content": CHAT_SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ]);
        } else {
            body["prompt"] = json!(prompt);
        }
        body
    }

    fn extract(&self, value: &Value) -> Result<(String, Option<Usage>), GatewayError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GatewayError::BadResponse("no choices".into()))?;
        let text = if self.config.chat {
            choice.pointer("/message/content")
        } else {
            choice.get("text")
        };
        let text = match text {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => String::new(),
            Some(other) => return Err(GatewayError::BadResponse(format!("non-string text: {other}"))),
        };
        let usage = value.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok());
        Ok((text, usage))
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl LlmGateway for HttpGateway {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        params.validate()?;
        let _slot = self.limiter.acquire();
        let url = self.config.endpoint(if self.config.chat {
            "chat/completions"
        } else {
            "completions"
        });
        let body = self.request_body(prompt, params);
        let attempts = self.config.max_attempts.max(1);
        let started = Instant::now();
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "completion request failed");
                    last_status = None;
                    last_message = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status == 401 || status == 403 {
                return Err(GatewayError::Auth { status });
            }
            let text = resp.text().unwrap_or_default();
            if retryable(status) {
                tracing::warn!(attempt, status, "retryable completion status");
                last_status = Some(status);
                last_message = text;
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(GatewayError::Http { status, message: text });
            }
            let value: Value =
                serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
            let (text, usage) = self.extract(&value)?;
            return Ok(Completion {
                text,
                model_tag: self.config.model.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                usage,
                retries: attempt,
            });
        }
        Err(GatewayError::Exhausted {
            attempts,
            last_status,
            message: last_message,
        })
    }
}

type Responder = dyn Fn(&str, &SamplingParams) -> Result<String, GatewayError> + Send + Sync;

/// Deterministic in-process gateway driven by a closure.
pub struct ScriptedGateway {
    responder: Box<Responder>,
    model_tag: String,
    limiter: InFlightLimiter,
    delay: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedGateway {
    pub fn from_fn(
        responder: impl Fn(&str, &SamplingParams) -> Result<String, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        ScriptedGateway {
            responder: Box::new(responder),
            model_tag: "scripted".into(),
            limiter: InFlightLimiter::new(DEFAULT_MAX_IN_FLIGHT),
            delay: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(move |_, _| Ok(text.clone()))
    }

    /// Answers by prompt hash, falling back to `fallback`.
    pub fn by_prompt_hash(table: HashMap<String, String>, fallback: impl Into<String>) -> Self {
        let fallback = fallback.into();
        Self::from_fn(move |prompt, _| {
            Ok(table
                .get(&prompt_sha256(prompt))
                .cloned()
                .unwrap_or_else(|| fallback.clone()))
        })
    }

    /// Answers every prompt with the rendered targets of the test sentence
    /// it ends with, after `transform`. Unknown sentences get an empty reply.
    pub fn echo_targets(
        sentences: &[AnnotatedSentence],
        task: Task,
        transform: impl Fn(&AnnotatedSentence, PredictionSet, &SamplingParams) -> PredictionSet + Send + Sync + 'static,
    ) -> Self {
        let by_text: HashMap<String, AnnotatedSentence> =
            sentences.iter().map(|s| (s.text.clone(), s.clone())).collect();
        Self::from_fn(move |prompt, params| {
            let Some(text) = extract_test_input(prompt) else {
                return Ok(String::new());
            };
            let Some(sentence) = by_text.get(&text) else {
                return Ok(String::new());
            };
            let set = transform(sentence, PredictionSet::gold(sentence, task), params);
            Ok(render_continuation(&set))
        })
    }

    pub fn with_model_tag(mut self, tag: impl Into<String>) -> Self {
        self.model_tag = tag.into();
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = InFlightLimiter::new(max);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

/// What a model would generate after a test stub for `set`.
pub fn render_continuation(set: &PredictionSet) -> String {
    let container = match set.task {
        Task::Ner => crate::parsing::NER_CONTAINER,
        Task::Re => crate::parsing::RE_CONTAINER,
    };
    let mut out = String::new();
    for line in target_lines(set) {
        out.push_str("    ");
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(&format!("    return {container}\n"));
    out
}

impl LlmGateway for ScriptedGateway {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        params.validate()?;
        let _slot = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let result = (self.responder)(prompt, params);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(Completion {
            text: result?,
            model_tag: self.model_tag.clone(),
            latency_ms: 0,
            usage: None,
            retries: 0,
        })
    }
}

/// One line of the capture log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub prompt_sha256: String,
    pub params: SamplingParams,
    pub response: Option<String>,
    pub status: u16,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub model: String,
}

/// Append-only JSONL capture file; appends are serialized.
pub struct CaptureLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl CaptureLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| GatewayError::Capture {
                path: path.display().to_string(),
                source,
            })?;
        Ok(CaptureLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &CaptureRecord) -> Result<(), GatewayError> {
        let line = serde_json::to_string(record).expect("capture record serializes");
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}").map_err(|source| GatewayError::Capture {
            path: self.path.display().to_string(),
            source,
        })
    }
}

pub fn read_capture(path: impl AsRef<Path>) -> Result<Vec<CaptureRecord>, GatewayError> {
    let path = path.as_ref();
    let io = |source| GatewayError::Capture {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| GatewayError::BadResponse(format!("capture log {}: {e}", path.display())))?;
        records.push(record);
    }
    Ok(records)
}

/// Records every call of the wrapped gateway.
pub struct CapturingGateway<G> {
    inner: G,
    log: CaptureLog,
}

impl<G: LlmGateway> CapturingGateway<G> {
    pub fn new(inner: G, log: CaptureLog) -> Self {
        CapturingGateway { inner, log }
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: LlmGateway> LlmGateway for CapturingGateway<G> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        let result = self.inner.complete(prompt, params);
        let record = match &result {
            Ok(c) => CaptureRecord {
                prompt_sha256: prompt_sha256(prompt),
                params: params.clone(),
                response: Some(c.text.clone()),
                status: 200,
                retries: c.retries,
                model: c.model_tag.clone(),
            },
            Err(e) => CaptureRecord {
                prompt_sha256: prompt_sha256(prompt),
                params: params.clone(),
                response: None,
                status: e.status(),
                retries: 0,
                model: String::new(),
            },
        };
        self.log.append(&record)?;
        result
    }
}

fn replay_key(hash: &str, params: &SamplingParams) -> String {
    format!("{hash}|{}", serde_json::to_string(params).expect("params serialize"))
}

/// Answers from a capture log; the first successful record per
/// (prompt, params) wins.
pub struct ReplayGateway {
    table: HashMap<String, (String, String)>,
    calls: AtomicUsize,
}

impl ReplayGateway {
    pub fn from_records(records: impl IntoIterator<Item = CaptureRecord>) -> Self {
        let mut table = HashMap::new();
        for r in records {
            if let Some(response) = r.response {
                table
                    .entry(replay_key(&r.prompt_sha256, &r.params))
                    .or_insert((response, r.model));
            }
        }
        ReplayGateway {
            table,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn replay_from_capture(path: impl AsRef<Path>) -> Result<ReplayGateway, GatewayError> {
    Ok(ReplayGateway::from_records(read_capture(path)?))
}

impl LlmGateway for ReplayGateway {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_sha256(prompt);
        match self.table.get(&replay_key(&hash, params)) {
            Some((text, model)) => Ok(Completion {
                text: text.clone(),
                model_tag: format!("replay:{model}"),
                latency_ms: 0,
                usage: None,
                retries: 0,
            }),
            None => Err(GatewayError::NotCaptured(hash)),
        }
    }
}
