//! Sentence embeddings and positive-demonstration selection.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Corpus};
use crate::gateway::{HttpConfig, InFlightLimiter};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding vector is empty")]
    EmptyVector,
    #[error("non-finite embedding component for sentence {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm vector: cosine similarity undefined")]
    ZeroNorm,
    #[error("embedding provider failed for {} sentence(s): {ids:?}: {message}", ids.len())]
    Provider { ids: Vec<String>, message: String },
    #[error("sentence {0} is not in the embedding index")]
    NotIndexed(String),
    #[error("duplicate sentence id {0} in index")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(String::new()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    // Adding 0.0 folds -0.0 into 0.0 so orthogonal vectors tie under total_cmp.
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) + 0.0)
}

/// A sentence to embed.
#[derive(Debug, Clone, Copy)]
pub struct EmbedItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the embedding source; part of the cache key.
    fn tag(&self) -> String;

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Deterministic bag-of-hashed-tokens embedding for tests and offline runs.
pub struct HashEmbeddingProvider {
    dim: usize,
    calls: AtomicUsize,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        HashEmbeddingProvider {
            dim: dim.max(1),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `embed` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            let digest = Sha256::digest(token.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % self.dim as u64;
            let weight = 1.0 + f64::from(digest[8]) / 255.0;
            v[bucket as usize] += weight;
            any = true;
        }
        if !any {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn tag(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(items.iter().map(|it| self.vector(it.text)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorLine {
    id: String,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provider: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_sha256: Option<String>,
}

/// Vectors computed elsewhere, looked up by sentence id.
pub struct PrecomputedProvider {
    tag: String,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let err = |message: String| RetrievalError::Cache {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            vectors.insert(rec.id, rec.vector);
        }
        Ok(PrecomputedProvider {
            tag: format!("precomputed:{}", path.display()),
            vectors,
        })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let missing: Vec<String> = items
            .iter()
            .filter(|it| !self.vectors.contains_key(it.id))
            .map(|it| it.id.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(RetrievalError::Provider {
                ids: missing,
                message: "no precomputed vector".into(),
            });
        }
        Ok(items.iter().map(|it| self.vectors[it.id].clone()).collect())
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct HttpEmbeddingProvider {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpConfig) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RetrievalError::Provider {
                ids: Vec::new(),
                message: e.to_string(),
            })?;
        Ok(HttpEmbeddingProvider { config, client })
    }

    fn url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/embeddings")
        } else {
            format!("{base}/v1/embeddings")
        }
    }

    fn try_once(&self, body: &Value) -> Result<Vec<Vec<f64>>, (bool, String)> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        if !(200..300).contains(&status) {
            let retry = status == 429 || status >= 500;
            return Err((retry, format!("status {status}: {text}")));
        }
        parse_embedding_response(&text).map_err(|m| (false, m))
    }
}

/// Extracts `data[i].embedding`, ordered by `data[i].index` when present.
pub fn parse_embedding_response(body: &str) -> Result<Vec<Vec<f64>>, String> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f64>,
        #[serde(default)]
        index: Option<usize>,
    }
    #[derive(Deserialize)]
    struct Resp {
        data: Vec<Item>,
    }
    let mut resp: Resp = serde_json::from_str(body).map_err(|e| e.to_string())?;
    if resp.data.iter().all(|d| d.index.is_some()) {
        resp.data.sort_by_key(|d| d.index);
    }
    Ok(resp.data.into_iter().map(|d| d.embedding).collect())
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn tag(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let body = json!({
            "model": self.config.model,
            "input": items.iter().map(|it| it.text).collect::<Vec<_>>(),
        });
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.try_once(&body) {
                Ok(v) if v.len() == items.len() => return Ok(v),
                Ok(v) => {
                    last = format!("expected {} vectors, got {}", items.len(), v.len());
                    break;
                }
                Err((retry, message)) => {
                    last = message;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(RetrievalError::Provider {
            ids: items.iter().map(|it| it.id.to_string()).collect(),
            message: last,
        })
    }
}

fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Vector cache keyed by (provider tag, text hash), optionally backed by a
/// JSONL file of `{"id", "vector", "provider", "text_sha256"}` lines.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), Vec<f64>>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
            file: None,
        }
    }

    /// Loads existing lines (if any) and appends new vectors to the file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref().to_path_buf();
        let err = |message: String| RetrievalError::Cache {
            path: path.display().to_string(),
            message,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: VectorLine =
                    serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                if let (Some(p), Some(h)) = (rec.provider, rec.text_sha256) {
                    entries.insert((p, h), rec.vector);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| err(e.to_string()))?;
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            file: Some((path, Mutex::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, provider: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .unwrap()
            .get(&(provider.to_string(), text_hash(text)))
            .cloned()
    }

    fn put(&self, provider: &str, id: &str, text: &str, vector: &[f64]) -> Result<(), RetrievalError> {
        let key = (provider.to_string(), text_hash(text));
        if let Some((path, file)) = &self.file {
            let line = serde_json::to_string(&VectorLine {
                id: id.to_string(),
                vector: vector.to_vec(),
                provider: Some(key.0.clone()),
                text_sha256: Some(key.1.clone()),
            })
            .expect("vector line serializes");
            let mut f = file.lock().unwrap();
            writeln!(f, "{line}").map_err(|e| RetrievalError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        self.entries.write().unwrap().insert(key, vector.to_vec());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

/// Exact-search index over sentence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub provider_tag: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn from_entries(
        provider_tag: impl Into<String>,
        entries: impl IntoIterator<Item = (String, Embedding)>,
    ) -> Result<Self, RetrievalError> {
        let mut index = EmbeddingIndex {
            provider_tag: provider_tag.into(),
            dim: 0,
            ids: Vec::new(),
            vectors: Vec::new(),
            positions: HashMap::new(),
        };
        for (id, v) in entries {
            index.insert(id, v)?;
        }
        Ok(index)
    }

    fn insert(&mut self, id: String, v: Embedding) -> Result<(), RetrievalError> {
        if self.ids.is_empty() {
            self.dim = v.dim();
        } else if v.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                found: v.dim(),
            });
        }
        if self.positions.insert(id.clone(), self.ids.len()).is_some() {
            return Err(RetrievalError::DuplicateId(id));
        }
        self.ids.push(id);
        self.vectors.push(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.positions.get(id).map(|&i| &self.vectors[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Merges another index built by the same provider; ids must not clash.
    pub fn extend(&mut self, other: &EmbeddingIndex) -> Result<(), RetrievalError> {
        for (id, v) in other.entries() {
            if self.positions.contains_key(id) {
                continue;
            }
            self.insert(id.to_string(), v.clone())?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, v) in self.entries() {
            out.push_str(&serde_json::to_string(&json!({"id": id, "vector": v})).unwrap());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| RetrievalError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Embeds sentence texts, reusing cached vectors and issuing provider
/// batches on up to `max_in_flight` threads.
pub fn embed_sentences(
    sentences: &[AnnotatedSentence],
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    options: EmbedOptions,
) -> Result<EmbeddingIndex, RetrievalError> {
    let tag = provider.tag();
    let missing: Vec<&AnnotatedSentence> = {
        let mut seen = std::collections::HashSet::new();
        sentences
            .iter()
            .filter(|s| cache.get(&tag, &s.text).is_none() && seen.insert(s.text.as_str()))
            .collect()
    };
    if !missing.is_empty() {
        let batches: Vec<&[&AnnotatedSentence]> = missing.chunks(options.batch_size.max(1)).collect();
        let next = AtomicUsize::new(0);
        let limiter = InFlightLimiter::new(options.max_in_flight);
        let failures: Mutex<Vec<RetrievalError>> = Mutex::new(Vec::new());
        let workers = options.max_in_flight.max(1).min(batches.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::SeqCst);
                    let Some(batch) = batches.get(b) else { break };
                    let items: Vec<EmbedItem> = batch
                        .iter()
                        .map(|s| EmbedItem {
                            id: &s.id,
                            text: &s.text,
                        })
                        .collect();
                    let ids = || items.iter().map(|it| it.id.to_string()).collect::<Vec<_>>();
                    let result = {
                        let _slot = limiter.acquire();
                        provider.embed(&items)
                    };
                    let outcome = result.and_then(|vectors| {
                        if vectors.len() != items.len() {
                            return Err(RetrievalError::Provider {
                                ids: ids(),
                                message: format!("expected {} vectors, got {}", items.len(), vectors.len()),
                            });
                        }
                        for (it, v) in items.iter().zip(&vectors) {
                            if v.iter().any(|x| !x.is_finite()) {
                                return Err(RetrievalError::NonFinite(it.id.to_string()));
                            }
                            cache.put(&tag, it.id, it.text, v)?;
                        }
                        Ok(())
                    });
                    if let Err(e) = outcome {
                        failures.lock().unwrap().push(e);
                    }
                });
            }
        });
        let mut failures = failures.into_inner().unwrap();
        if failures.len() == 1 {
            return Err(failures.remove(0));
        }
        if !failures.is_empty() {
            let mut ids: Vec<String> = Vec::new();
            let mut messages = Vec::new();
            for f in failures {
                match f {
                    RetrievalError::Provider { ids: failed, message } => {
                        ids.extend(failed);
                        messages.push(message);
                    }
                    RetrievalError::NonFinite(id) => {
                        messages.push(format!("non-finite vector for {id}"));
                        ids.push(id);
                    }
                    other => messages.push(other.to_string()),
                }
            }
            ids.sort();
            return Err(RetrievalError::Provider {
                ids,
                message: messages.join("; "),
            });
        }
    }
    let mut entries = Vec::with_capacity(sentences.len());
    for s in sentences {
        let v = cache
            .get(&tag, &s.text)
            .ok_or_else(|| RetrievalError::NotIndexed(s.id.clone()))?;
        let v = Embedding::new(v).map_err(|e| match e {
            RetrievalError::NonFinite(_) => RetrievalError::NonFinite(s.id.clone()),
            other => other,
        })?;
        entries.push((s.id.clone(), v));
    }
    EmbeddingIndex::from_entries(tag, entries)
}

/// Ranked sentence ids with their similarity (`None` for random picks).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<String>,
    pub similarities: Vec<Option<f64>>,
    /// Fewer than `k` eligible sentences were available.
    pub short: bool,
}

fn eligible<'a>(pool: &'a Corpus, exclude: Option<&'a str>) -> impl Iterator<Item = &'a AnnotatedSentence> {
    let task = pool.task();
    pool.sentences
        .iter()
        .filter(move |s| s.has_annotations(task) && Some(s.id.as_str()) != exclude)
}

/// Top-`k` annotated pool sentences by cosine similarity to `query`,
/// ties broken by corpus order. `exclude` removes the query's own id.
pub fn knn_positives(
    index: &EmbeddingIndex,
    query: &Embedding,
    k: usize,
    pool: &Corpus,
    exclude: Option<&str>,
) -> Result<Selection, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut scored: Vec<(f64, &str)> = Vec::new();
    for s in eligible(pool, exclude) {
        let v = index.get(&s.id).ok_or_else(|| RetrievalError::NotIndexed(s.id.clone()))?;
        scored.push((cosine_similarity(query, v)?, &s.id));
    }
    // Stable sort keeps corpus order among equal similarities.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let short = scored.len() < k;
    if short {
        tracing::warn!(k, available = scored.len(), "fewer eligible positives than requested");
    }
    scored.truncate(k);
    Ok(Selection {
        ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        similarities: scored.iter().map(|(s, _)| Some(*s)).collect(),
        short,
    })
}

/// Uniform sample without replacement among annotated pool sentences.
pub fn random_positives(
    pool: &Corpus,
    k: usize,
    seed: u64,
    exclude: Option<&str>,
) -> Result<Selection, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let candidates: Vec<&str> = eligible(pool, exclude).map(|s| s.id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = candidates.len() < k;
    let ids: Vec<String> = candidates
        .choose_multiple(&mut rng, k.min(candidates.len()))
        .map(|id| id.to_string())
        .collect();
    Ok(Selection {
        similarities: vec![None; ids.len()],
        ids,
        short,
    })
}
