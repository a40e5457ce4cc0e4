//! End-to-end experiment runner.
//!
//! A run loads the train and test corpora, embeds them, and then for each
//! seed mines (or reuses) a negative bank, builds one prompt per test
//! sentence, queries the model, parses and scores the answer. Every
//! intermediate artifact is written under `runs/<config hash>/` inside the
//! output directory; negative banks are shared between runs that agree on
//! the mining settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_jsonl, sentence_to_json, AnnotatedSentence, Corpus, CorpusError, Split, Task, TypeSchema};
use crate::evaluation::{aggregate_metrics, categorize_errors, mean_std, score, ErrorCounts, Metrics};
use crate::gateway::{prompt_sha256, GatewayError, HttpConfig, LlmGateway, SamplingParams};
use crate::mining::{
    mine_hard_negatives, read_negative_bank, write_negative_bank, MiningConfig, MiningError, NegativeSample, Ranking,
};
use crate::parsing::{parse_output, strip_echo, ParseDiagnostics, PredictionSet};
use crate::prompting::{assemble_prompt, DemoOrder, Demonstration, Prompt, PromptError, DEFAULT_BUDGET_TOKENS};
use crate::retrieval::{
    cosine_similarity, embed_sentences, knn_positives, random_positives, EmbedOptions, EmbeddingCache,
    EmbeddingIndex, EmbeddingProvider, RetrievalError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl RunError {
    /// Process exit code: 1 for configuration and data problems, 2 for
    /// backend failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Gateway(_) | RunError::Mining(MiningError::Gateway { .. }) => 2,
            _ => 1,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveStrategy {
    /// Sentence-embedding nearest neighbours.
    Knn,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Self-consistency voting plus the F1 band.
    F1AndSc,
    /// Single query plus the F1 band.
    F1Only,
    /// Self-consistency voting, any wrong consensus.
    ScOnly,
    /// Any wrong single-query answer, picked at random.
    Random,
}

impl PositiveStrategy {
    pub fn label(self) -> &'static str {
        match self {
            PositiveStrategy::Knn => "SE",
            PositiveStrategy::Random => "RA_pos",
        }
    }
}

impl NegativeStrategy {
    pub fn label(self) -> &'static str {
        match self {
            NegativeStrategy::F1AndSc => "F1&SC",
            NegativeStrategy::F1Only => "F1",
            NegativeStrategy::ScOnly => "SC",
            NegativeStrategy::Random => "RA_neg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    Hash { dim: usize },
    Http(HttpConfig),
    Precomputed { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Hash { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http(HttpConfig),
    Replay { path: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Http(HttpConfig::default())
    }
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub shot_total: usize,
    pub n_negatives: usize,
    pub positive_strategy: PositiveStrategy,
    pub negative_strategy: NegativeStrategy,
    pub tau: f64,
    pub vote_n: usize,
    /// Maximum size of a mined negative bank.
    pub negative_limit: usize,
    /// Positives in the bootstrap prompts used for mining.
    pub mining_shots: usize,
    /// Mine only the first N annotated training sentences.
    pub mining_pool_limit: Option<usize>,
    /// Score only the first N test sentences.
    pub test_limit: Option<usize>,
    pub sampling: SamplingParams,
    pub budget_tokens: usize,
    pub seeds: Vec<u64>,
    pub demo_order: DemoOrder,
    pub max_in_flight: usize,
    pub output_dir: PathBuf,
    pub capture_log: Option<PathBuf>,
    pub embedding: EmbeddingSource,
    pub backend: BackendConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: PathBuf::from("schema.json"),
            train: PathBuf::from("train.jsonl"),
            test: PathBuf::from("test.jsonl"),
            shot_total: 20,
            n_negatives: 2,
            positive_strategy: PositiveStrategy::Knn,
            negative_strategy: NegativeStrategy::F1AndSc,
            tau: 0.5,
            vote_n: 3,
            negative_limit: 200,
            mining_shots: 8,
            mining_pool_limit: None,
            test_limit: None,
            sampling: SamplingParams::default(),
            budget_tokens: DEFAULT_BUDGET_TOKENS,
            seeds: vec![13, 42, 87],
            demo_order: DemoOrder::MostSimilarFirst,
            max_in_flight: 4,
            output_dir: PathBuf::from("runs"),
            capture_log: None,
            embedding: EmbeddingSource::default(),
            backend: BackendConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths are resolved against its directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.schema);
        fix(&mut self.train);
        fix(&mut self.test);
        fix(&mut self.output_dir);
        if let Some(p) = self.capture_log.as_mut() {
            fix(p);
        }
        if let EmbeddingSource::Precomputed { path } = &mut self.embedding {
            fix(path);
        }
        if let BackendConfig::Replay { path } = &mut self.backend {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.shot_total == 0 {
            return bad("shot_total must be at least 1".into());
        }
        if self.n_negatives > self.shot_total {
            return bad(format!(
                "n_negatives ({}) exceeds shot_total ({})",
                self.n_negatives, self.shot_total
            ));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1), got {}", self.tau));
        }
        if self.vote_n == 0 {
            return bad("vote_n must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.budget_tokens == 0 {
            return bad("budget_tokens must be positive".into());
        }
        if self.mining_shots == 0 {
            return bad("mining_shots must be at least 1".into());
        }
        self.sampling.validate().map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn n_positives(&self) -> usize {
        self.shot_total - self.n_negatives
    }

    fn mining_config(&self, seed: u64) -> MiningConfig {
        let (votes, tau, ranking) = match self.negative_strategy {
            NegativeStrategy::F1AndSc => (self.vote_n, self.tau, Ranking::Closeness),
            NegativeStrategy::F1Only => (1, self.tau, Ranking::Closeness),
            NegativeStrategy::ScOnly => (self.vote_n, 0.0, Ranking::Closeness),
            NegativeStrategy::Random => (1, 0.0, Ranking::Random(seed)),
        };
        MiningConfig {
            votes,
            tau,
            limit: self.negative_limit,
            params: self.sampling.with_seed(seed),
            ranking,
            max_in_flight: self.max_in_flight,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corpus_digest(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for s in &corpus.sentences {
        h.update(sentence_to_json(s).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Derives a per-item seed from a run seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{key}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn build_embedding_provider(source: &EmbeddingSource) -> Result<Box<dyn EmbeddingProvider>, RunError> {
    use crate::retrieval::{HashEmbeddingProvider, HttpEmbeddingProvider, PrecomputedProvider};
    Ok(match source {
        EmbeddingSource::Hash { dim } => Box::new(HashEmbeddingProvider::new(*dim)),
        EmbeddingSource::Http(cfg) => Box::new(HttpEmbeddingProvider::new(cfg.clone().with_env_overrides())?),
        EmbeddingSource::Precomputed { path } => Box::new(PrecomputedProvider::from_jsonl(path)?),
    })
}

pub fn build_gateway(backend: &BackendConfig) -> Result<Box<dyn LlmGateway>, RunError> {
    use crate::gateway::{replay_from_capture, HttpGateway};
    Ok(match backend {
        BackendConfig::Http(cfg) => Box::new(HttpGateway::new(cfg.clone().with_env_overrides())?),
        BackendConfig::Replay { path } => Box::new(replay_from_capture(path)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub complete: bool,
    pub test_size: usize,
    pub scored: usize,
    /// Sentences whose generation yielded a usable answer.
    pub parseable: usize,
    pub metrics: Metrics,
    pub errors: ErrorCounts,
    pub negatives_in_bank: usize,
    pub negative_bank: Option<String>,
    pub artifacts: String,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub train_digest: String,
    pub test_digest: String,
    pub embedding_provider: String,
    pub capture_log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub shot_total: usize,
    pub n_negatives: usize,
    pub positive_strategy: PositiveStrategy,
    pub negative_strategy: NegativeStrategy,
    pub status: RunStatus,
    pub seeds: Vec<SeedReport>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Complete => 0,
            RunStatus::Partial => 3,
        }
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task={} shots={} negatives={} positives={} negatives_strategy={} status={:?}",
            self.task.as_str(),
            self.shot_total,
            self.n_negatives,
            self.positive_strategy.label(),
            self.negative_strategy.label(),
            self.status
        );
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "seed", "P", "R", "F1", "tp", "fp", "fn", "type_err", "span_err", "rel_err"
        );
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}{}",
                s.seed,
                s.metrics.precision,
                s.metrics.recall,
                s.metrics.f1,
                s.metrics.tp,
                s.metrics.fp,
                s.metrics.fn_,
                s.errors.entity_type_errors,
                s.errors.entity_span_errors,
                s.errors.relation_type_errors,
                if s.complete { "" } else { "  (incomplete)" }
            );
        }
        let _ = writeln!(out, "mean F1 {:.4} +/- {:.4}", self.mean_f1, self.std_f1);
        out
    }
}

/// Per-sentence outcome persisted to `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub prompt_sha256: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub generation: String,
    pub prediction: PredictionSet,
    pub diagnostics: ParseDiagnostics,
    pub metrics: Metrics,
    pub errors: ErrorCounts,
    pub parseable: bool,
}

/// Loaded corpora plus configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Corpus,
    pub test: Corpus,
    train_digest: String,
    test_digest: String,
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let schema = TypeSchema::from_json_file(&config.schema)?;
        let train = load_jsonl(&config.train, &schema, Split::Train)?;
        let test = load_jsonl(&config.test, &schema, Split::Test)?;
        Self::from_corpora(config, train, test)
    }

    pub fn from_corpora(config: ExperimentConfig, train: Corpus, test: Corpus) -> Result<Self, RunError> {
        config.validate()?;
        if train.schema != test.schema {
            return Err(RunError::Config("train and test schemas differ".into()));
        }
        let test = match config.test_limit {
            Some(n) => test.truncated(n),
            None => test,
        };
        Ok(Experiment {
            train_digest: corpus_digest(&train),
            test_digest: corpus_digest(&test),
            config,
            train,
            test,
        })
    }

    /// Same corpora, different configuration.
    pub fn with_config(&self, config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut next = self.clone();
        if config.test_limit != self.config.test_limit {
            return Err(RunError::Config("test_limit cannot change between sweep cells".into()));
        }
        next.config = config;
        Ok(next)
    }

    pub fn schema(&self) -> &TypeSchema {
        &self.train.schema
    }

    pub fn task(&self) -> Task {
        self.train.schema.task
    }

    /// Hash of everything that determines the run's results.
    pub fn config_hash(&self, embedder_tag: &str) -> String {
        let mut v = serde_json::to_value(&self.config).expect("config serializes");
        if let Value::Object(map) = &mut v {
            for key in ["schema", "train", "test", "output_dir", "capture_log", "backend", "embedding"] {
                map.remove(key);
            }
            map.insert("train_digest".into(), json!(self.train_digest));
            map.insert("test_digest".into(), json!(self.test_digest));
            map.insert("schema_value".into(), json!(self.schema()));
            map.insert("embedding_provider".into(), json!(embedder_tag));
        }
        sha256_hex(v.to_string().as_bytes())
    }

    fn mining_hash(&self, embedder_tag: &str, seed: u64) -> String {
        let c = &self.config;
        let v = json!({
            "train_digest": self.train_digest,
            "schema": self.schema(),
            "strategy": c.negative_strategy,
            "tau": c.tau,
            "vote_n": c.vote_n,
            "limit": c.negative_limit,
            "mining_shots": c.mining_shots,
            "mining_pool_limit": c.mining_pool_limit,
            "budget_tokens": c.budget_tokens,
            "demo_order": c.demo_order,
            "sampling": c.sampling,
            "embedding_provider": embedder_tag,
            "seed": seed,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    /// Embeds train and test sentences through the shared on-disk cache.
    pub fn build_indices(
        &self,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<(EmbeddingIndex, EmbeddingIndex), RunError> {
        let cache_dir = self.config.output_dir.join("cache");
        fs::create_dir_all(&cache_dir).map_err(|e| RunError::io(&cache_dir, e))?;
        let cache = EmbeddingCache::open(cache_dir.join("embeddings.jsonl"))?;
        let options = EmbedOptions {
            max_in_flight: self.config.max_in_flight,
            ..EmbedOptions::default()
        };
        let train = embed_sentences(&self.train.sentences, embedder, &cache, options)?;
        let test = embed_sentences(&self.test.sentences, embedder, &cache, options)?;
        Ok((train, test))
    }

    fn mining_pool(&self) -> Corpus {
        let task = self.task();
        let mut pool = self.train.clone();
        if let Some(n) = self.config.mining_pool_limit {
            let mut kept = 0;
            pool.sentences.retain(|s| {
                if kept < n && s.has_annotations(task) {
                    kept += 1;
                    true
                } else {
                    false
                }
            });
        }
        pool
    }

    /// Positives-only prompt used to elicit the model's own predictions on
    /// a training sentence.
    pub fn bootstrap_prompt(&self, train_index: &EmbeddingIndex, sentence: &AnnotatedSentence) -> Result<Prompt, RunError> {
        let query = train_index
            .get(&sentence.id)
            .ok_or_else(|| RetrievalError::NotIndexed(sentence.id.clone()))?;
        let selection = knn_positives(train_index, query, self.config.mining_shots, &self.train, Some(&sentence.id))?;
        let positives = self.demonstrations(&selection.ids, &selection.similarities)?;
        Ok(assemble_prompt(
            self.schema(),
            &positives,
            &[],
            &sentence.text,
            self.config.budget_tokens,
            self.config.demo_order,
        )?)
    }

    fn demonstrations(&self, ids: &[String], similarities: &[Option<f64>]) -> Result<Vec<Demonstration>, RunError> {
        ids.iter()
            .zip(similarities)
            .map(|(id, sim)| {
                let s = self
                    .train
                    .get(id)
                    .ok_or_else(|| RetrievalError::NotIndexed(id.clone()))?;
                Ok(Demonstration::positive(s, self.schema(), *sim)?)
            })
            .collect()
    }

    /// Mines a fresh negative bank for `seed`.
    pub fn mine_negatives(
        &self,
        train_index: &EmbeddingIndex,
        llm: &dyn LlmGateway,
        seed: u64,
    ) -> Result<crate::mining::MiningOutcome, RunError> {
        let pool = self.mining_pool();
        let prompt_for = |s: &AnnotatedSentence| {
            self.bootstrap_prompt(train_index, s)
                .map(|p| p.text())
                .map_err(|e| e.to_string())
        };
        Ok(mine_hard_negatives(&pool, llm, &self.config.mining_config(seed), &prompt_for)?)
    }

    /// Loads the negative bank for `seed` from the output directory, mining
    /// it first if absent. Returns the bank and its path relative to the
    /// output directory.
    pub fn negative_bank(
        &self,
        train_index: &EmbeddingIndex,
        llm: &dyn LlmGateway,
        seed: u64,
    ) -> Result<(Vec<NegativeSample>, String), RunError> {
        let rel = format!("negatives/{}.jsonl", &self.mining_hash(&train_index.provider_tag, seed)[..16]);
        let path = self.config.output_dir.join(&rel);
        if path.exists() {
            return Ok((read_negative_bank(&path, &self.train)?, rel));
        }
        let outcome = self.mine_negatives(train_index, llm, seed)?;
        let dir = path.parent().expect("bank path has a parent");
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        let generations_path = path.with_extension("generations.jsonl");
        write_jsonl(&generations_path, &outcome.generations)?;
        // Written last so an interrupted mining run is not mistaken for a bank.
        write_negative_bank(&path, &outcome.negatives)?;
        Ok((outcome.negatives, rel))
    }

    /// The full prompt for one test sentence.
    pub fn build_prompt(
        &self,
        indices: (&EmbeddingIndex, &EmbeddingIndex),
        bank: &[NegativeSample],
        seed: u64,
        sentence: &AnnotatedSentence,
    ) -> Result<Prompt, RunError> {
        let (train_index, test_index) = indices;
        let query = test_index
            .get(&sentence.id)
            .ok_or_else(|| RetrievalError::NotIndexed(sentence.id.clone()))?;
        let n_pos = self.config.n_positives();
        let positives = if n_pos == 0 {
            Vec::new()
        } else {
            let selection = match self.config.positive_strategy {
                PositiveStrategy::Knn => knn_positives(train_index, query, n_pos, &self.train, Some(&sentence.id))?,
                PositiveStrategy::Random => random_positives(
                    &self.train,
                    n_pos,
                    derive_seed(seed, &sentence.id),
                    Some(&sentence.id),
                )?,
            };
            self.demonstrations(&selection.ids, &selection.similarities)?
        };
        let mut exclude: Vec<&str> = positives.iter().map(|d| d.sentence_id.as_str()).collect();
        exclude.push(&sentence.id);
        let negatives = self.select_negatives(train_index, query, bank, seed, &sentence.id, &exclude)?;
        Ok(assemble_prompt(
            self.schema(),
            &positives,
            &negatives,
            &sentence.text,
            self.config.budget_tokens,
            self.config.demo_order,
        )?)
    }

    /// Picks `n_negatives` bank entries: most similar to the test sentence,
    /// or a seeded random subset for the random strategy. Sentences already
    /// shown as positives, and the test sentence itself, are skipped.
    fn select_negatives(
        &self,
        train_index: &EmbeddingIndex,
        query: &crate::retrieval::Embedding,
        bank: &[NegativeSample],
        seed: u64,
        test_id: &str,
        exclude: &[&str],
    ) -> Result<Vec<Demonstration>, RunError> {
        let n = self.config.n_negatives;
        if n == 0 {
            return Ok(Vec::new());
        }
        let candidates: Vec<&NegativeSample> = bank
            .iter()
            .filter(|b| !exclude.contains(&b.sentence.id.as_str()))
            .collect();
        let chosen: Vec<(&NegativeSample, Option<f64>)> = match self.config.negative_strategy {
            NegativeStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("neg:{test_id}")));
                candidates
                    .choose_multiple(&mut rng, n.min(candidates.len()))
                    .map(|b| (*b, None))
                    .collect()
            }
            _ => {
                let mut scored = Vec::with_capacity(candidates.len());
                for b in candidates {
                    let v = train_index
                        .get(&b.sentence.id)
                        .ok_or_else(|| RetrievalError::NotIndexed(b.sentence.id.clone()))?;
                    scored.push((b, cosine_similarity(query, v)?));
                }
                scored.sort_by(|a, b| b.1.total_cmp(&a.1));
                scored.into_iter().take(n).map(|(b, s)| (b, Some(s))).collect()
            }
        };
        if chosen.len() < n {
            tracing::warn!(wanted = n, available = chosen.len(), "negative bank too small");
        }
        chosen
            .into_iter()
            .map(|(b, sim)| Ok(Demonstration::negative(b, self.schema(), sim)?))
            .collect()
    }

    fn score_sentence(
        &self,
        indices: (&EmbeddingIndex, &EmbeddingIndex),
        bank: &[NegativeSample],
        seed: u64,
        llm: &dyn LlmGateway,
        sentence: &AnnotatedSentence,
    ) -> Result<(SentenceRecord, String), RunError> {
        let prompt = self.build_prompt(indices, bank, seed, sentence)?;
        let text = prompt.text();
        let completion = llm.complete(&text, &self.config.sampling.with_seed(seed))?;
        let body = strip_echo(&completion.text, &text);
        let task = self.task();
        let (prediction, diagnostics) = parse_output(body, task);
        let gold = PredictionSet::gold(sentence, task);
        let metrics = score(&prediction, &gold).expect("prediction and gold share the task");
        let errors = categorize_errors(&prediction, &sentence.text, self.schema());
        let parseable =
            diagnostics.lines_parsed > 0 || (diagnostics.skipped.is_empty() && body.contains("return"));
        Ok((
            SentenceRecord {
                id: sentence.id.clone(),
                prompt_sha256: prompt_sha256(&text),
                n_pos: prompt.n_pos,
                n_neg: prompt.n_neg,
                generation: completion.text,
                prediction,
                diagnostics,
                metrics,
                errors,
                parseable,
            },
            text,
        ))
    }

    fn run_dir(&self, config_hash: &str) -> String {
        format!("runs/{}", &config_hash[..16])
    }

    fn run_seed(
        &self,
        indices: (&EmbeddingIndex, &EmbeddingIndex),
        llm: &dyn LlmGateway,
        seed: u64,
        run_dir: &str,
    ) -> Result<SeedReport, RunError> {
        let seed_rel = format!("{run_dir}/seed-{seed}");
        let seed_dir = self.config.output_dir.join(&seed_rel);
        fs::create_dir_all(&seed_dir).map_err(|e| RunError::io(&seed_dir, e))?;
        let mut report = SeedReport {
            seed,
            complete: false,
            test_size: self.test.len(),
            scored: 0,
            parseable: 0,
            metrics: aggregate_metrics(&[]),
            errors: ErrorCounts::default(),
            negatives_in_bank: 0,
            negative_bank: None,
            artifacts: seed_rel,
            failure: None,
        };

        let bank = if self.config.n_negatives > 0 {
            match self.negative_bank(indices.0, llm, seed) {
                Ok((bank, rel)) => {
                    report.negative_bank = Some(rel);
                    bank
                }
                Err(e @ RunError::Mining(MiningError::Gateway { .. })) => {
                    report.failure = Some(e.to_string());
                    write_json(&seed_dir.join("report.json"), &report)?;
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };
        report.negatives_in_bank = bank.len();

        type Slot = Option<Result<(SentenceRecord, String), RunError>>;
        let slots: Vec<Mutex<Slot>> = self.test.sentences.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = self.config.max_in_flight.max(1).min(self.test.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sentence) = self.test.sentences.get(i) else { break };
                    let result = self.score_sentence(indices, &bank, seed, llm, sentence);
                    if result.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });

        let mut records = Vec::new();
        let mut prompts = Vec::new();
        let mut failure: Option<RunError> = None;
        for slot in slots {
            match slot.into_inner().unwrap() {
                Some(Ok((record, prompt))) => {
                    prompts.push(json!({
                        "id": record.id,
                        "prompt": prompt,
                        "n_pos": record.n_pos,
                        "n_neg": record.n_neg,
                    }));
                    records.push(record);
                }
                Some(Err(e)) if failure.is_none() => failure = Some(e),
                Some(Err(_)) => {}
                None => {}
            }
        }
        write_jsonl(&seed_dir.join("prompts.jsonl"), &prompts)?;
        write_jsonl(&seed_dir.join("predictions.jsonl"), &records)?;

        let metrics: Vec<Metrics> = records.iter().map(|r| r.metrics.clone()).collect();
        report.metrics = aggregate_metrics(&metrics);
        report.errors = records.iter().fold(ErrorCounts::default(), |acc, r| acc + r.errors);
        report.scored = records.len();
        report.parseable = records.iter().filter(|r| r.parseable).count();
        match failure {
            None => report.complete = true,
            Some(e @ RunError::Gateway(_)) => report.failure = Some(e.to_string()),
            Some(e) => return Err(e),
        }
        write_json(&seed_dir.join("report.json"), &report)?;
        Ok(report)
    }

    /// Runs every configured seed and writes the aggregate report.
    pub fn run(&self, llm: &dyn LlmGateway, embedder: &dyn EmbeddingProvider) -> Result<RunReport, RunError> {
        let (train_index, test_index) = self.build_indices(embedder)?;
        let config_hash = self.config_hash(&train_index.provider_tag);
        let run_dir = self.run_dir(&config_hash);
        let run_path = self.config.output_dir.join(&run_dir);
        fs::create_dir_all(&run_path).map_err(|e| RunError::io(&run_path, e))?;
        // Stored relative to the output directory so reruns elsewhere match.
        let stored = ExperimentConfig {
            output_dir: PathBuf::from("."),
            ..self.config.clone()
        };
        write_json(&run_path.join("config.json"), &stored)?;

        let mut seeds = Vec::new();
        for &seed in &self.config.seeds {
            let report = self.run_seed((&train_index, &test_index), llm, seed, &run_dir)?;
            if !report.complete {
                tracing::warn!(seed, failure = ?report.failure, "seed incomplete");
            }
            seeds.push(report);
        }
        let f1s: Vec<f64> = seeds.iter().map(|s| s.metrics.f1).collect();
        let (mean_f1, std_f1) = mean_std(&f1s);
        let status = if seeds.iter().all(|s| s.complete) {
            RunStatus::Complete
        } else {
            RunStatus::Partial
        };
        let report = RunReport {
            task: self.task(),
            shot_total: self.config.shot_total,
            n_negatives: self.config.n_negatives,
            positive_strategy: self.config.positive_strategy,
            negative_strategy: self.config.negative_strategy,
            status,
            seeds,
            mean_f1,
            std_f1,
            provenance: Provenance {
                config_hash,
                train_digest: self.train_digest.clone(),
                test_digest: self.test_digest.clone(),
                embedding_provider: train_index.provider_tag.clone(),
                capture_log: self.config.capture_log.as_ref().map(|p| p.display().to_string()),
            },
        };
        let report_path = run_path.join("report.json");
        fs::write(&report_path, report.to_json()).map_err(|e| RunError::io(&report_path, e))?;
        Ok(report)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RunError::io(path, e))
}

pub fn run_experiment(
    config: ExperimentConfig,
    llm: &dyn LlmGateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<RunReport, RunError> {
    Experiment::load(config)?.run(llm, embedder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub shot_total: usize,
    pub n_negatives: usize,
    pub positive_strategy: PositiveStrategy,
    pub negative_strategy: NegativeStrategy,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub per_seed_f1: Vec<f64>,
    pub status: RunStatus,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    /// Plot-ready CSV, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,shot_total,n_negatives,positive_strategy,negative_strategy,mean_f1,std_f1,status\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{}",
                r.label,
                r.shot_total,
                r.n_negatives,
                r.positive_strategy.label(),
                r.negative_strategy.label(),
                r.mean_f1,
                r.std_f1,
                match r.status {
                    RunStatus::Complete => "complete",
                    RunStatus::Partial => "partial",
                }
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>6} {:>6} {:>10} {:>10}", self.parameter, "shots", "neg", "mean F1", "std");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>6} {:>10.4} {:>10.4}{}",
                r.label,
                r.shot_total,
                r.n_negatives,
                r.mean_f1,
                r.std_f1,
                r.warning.as_deref().map(|w| format!("  ({w})")).unwrap_or_default()
            );
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), RunError> {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, self.to_json()).map_err(|e| RunError::io(&json_path, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()).map_err(|e| RunError::io(&csv_path, e))
    }
}

fn sweep(
    base: &Experiment,
    parameter: &str,
    cells: Vec<(String, ExperimentConfig, Option<String>)>,
    llm: &dyn LlmGateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<SweepTable, RunError> {
    // Validate every cell before spending any queries.
    let experiments = cells
        .into_iter()
        .map(|(label, config, warning)| Ok((label, base.with_config(config)?, warning)))
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut rows = Vec::new();
    for (label, exp, warning) in experiments {
        let report = exp.run(llm, embedder)?;
        rows.push(SweepRow {
            label,
            shot_total: exp.config.shot_total,
            n_negatives: exp.config.n_negatives,
            positive_strategy: exp.config.positive_strategy,
            negative_strategy: exp.config.negative_strategy,
            mean_f1: report.mean_f1,
            std_f1: report.std_f1,
            per_seed_f1: report.seeds.iter().map(|s| s.metrics.f1).collect(),
            status: report.status,
            warning,
        });
    }
    let table = SweepTable {
        parameter: parameter.to_string(),
        rows,
    };
    table.write(&base.config.output_dir.join("sweeps"), parameter)?;
    Ok(table)
}

/// Varies the demonstration total with the negative count held fixed.
pub fn sweep_shots(
    base: &Experiment,
    shot_values: &[usize],
    llm: &dyn LlmGateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<SweepTable, RunError> {
    let cells = shot_values
        .iter()
        .map(|&shots| {
            let config = ExperimentConfig {
                shot_total: shots,
                ..base.config.clone()
            };
            (format!("shots={shots}"), config, None)
        })
        .collect();
    sweep(base, "shots", cells, llm, embedder)
}

/// Varies the negative count with the demonstration total held fixed.
pub fn sweep_proportions(
    base: &Experiment,
    negative_counts: &[usize],
    llm: &dyn LlmGateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<SweepTable, RunError> {
    let total = base.config.shot_total;
    let cells = negative_counts
        .iter()
        .map(|&n| {
            let config = ExperimentConfig {
                n_negatives: n,
                ..base.config.clone()
            };
            let warning = (n == total).then(|| "no positive demonstrations".to_string());
            (format!("negatives={n}"), config, warning)
        })
        .collect();
    sweep(base, "proportions", cells, llm, embedder)
}

/// One run per (positive, negative) strategy pair.
pub fn compare_strategies(
    base: &Experiment,
    grid: &[(PositiveStrategy, NegativeStrategy)],
    llm: &dyn LlmGateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<SweepTable, RunError> {
    let cells = grid
        .iter()
        .map(|&(p, n)| {
            let config = ExperimentConfig {
                positive_strategy: p,
                negative_strategy: n,
                ..base.config.clone()
            };
            (format!("{}+{}", p.label(), n.label()), config, None)
        })
        .collect();
    sweep(base, "strategies", cells, llm, embedder)
}

/// Every positive strategy crossed with every negative strategy.
pub fn full_strategy_grid() -> Vec<(PositiveStrategy, NegativeStrategy)> {
    let mut grid = Vec::new();
    for p in [PositiveStrategy::Knn, PositiveStrategy::Random] {
        for n in [
            NegativeStrategy::F1AndSc,
            NegativeStrategy::F1Only,
            NegativeStrategy::ScOnly,
            NegativeStrategy::Random,
        ] {
            grid.push((p, n));
        }
    }
    grid
}

/// Scores stored predictions against a gold corpus. Each line carries an
/// `id` and either a `prediction` object or a raw `generation` string.
pub fn evaluate_predictions(
    gold: &Corpus,
    predictions_path: &Path,
) -> Result<(Metrics, ErrorCounts, BTreeMap<String, Metrics>), RunError> {
    let text = fs::read_to_string(predictions_path).map_err(|e| RunError::io(predictions_path, e))?;
    let task = gold.task();
    let mut by_id: BTreeMap<String, PredictionSet> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| RunError::Config(format!("{} line {}: {e}", predictions_path.display(), i + 1)))?;
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| RunError::Config(format!("line {}: missing id", i + 1)))?
            .to_string();
        let set = if let Some(p) = v.get("prediction") {
            serde_json::from_value::<PredictionSet>(p.clone())
                .map_err(|e| RunError::Config(format!("line {}: {e}", i + 1)))?
        } else if let Some(g) = v.get("generation").and_then(Value::as_str) {
            parse_output(g, task).0
        } else {
            return Err(RunError::Config(format!("line {}: need `prediction` or `generation`", i + 1)));
        };
        by_id.insert(id, set);
    }
    let mut per_sentence = BTreeMap::new();
    let mut errors = ErrorCounts::default();
    for s in &gold.sentences {
        let pred = by_id.remove(&s.id).unwrap_or_else(|| PredictionSet::empty(task));
        let gold_set = PredictionSet::gold(s, task);
        let m = score(&pred, &gold_set).map_err(|e| RunError::Config(e.to_string()))?;
        errors += categorize_errors(&pred, &s.text, &gold.schema);
        per_sentence.insert(s.id.clone(), m);
    }
    if !by_id.is_empty() {
        tracing::warn!(unknown = by_id.len(), "predictions for ids not in the gold corpus were ignored");
    }
    let all: Vec<Metrics> = per_sentence.values().cloned().collect();
    Ok((aggregate_metrics(&all), errors, per_sentence))
}
