//! Hard-negative mining.
//!
//! Each annotated pool sentence is sent to the model several times with a
//! positives-only prompt. The per-element majority over those answers is the
//! consensus; a sentence becomes a negative when its consensus is wrong but
//! still within the F1 band `[tau, 1)` of gold.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Corpus, EntityMention, RelationTriple, Task};
use crate::evaluation::sentence_f1;
use crate::gateway::{GatewayError, LlmGateway, SamplingParams};
use crate::parsing::{parse_output, strip_echo, ParseDiagnostics, PredictionSet};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("tau must be in [0, 1), got {0}")]
    BadTau(f64),
    #[error("vote count must be at least 1")]
    ZeroVotes,
    #[error("sample {id}: {message}")]
    InvalidSample { id: String, message: String },
    #[error("sentence {id}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error("prompt construction failed for {id}: {message}")]
    Prompt { id: String, message: String },
    #[error("negative bank {path}: {message}")]
    Bank { path: String, message: String },
}

/// A sentence whose consensus prediction is close to, but not equal to, gold.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub sentence: AnnotatedSentence,
    pub wrong_prediction: PredictionSet,
    pub gold: PredictionSet,
    pub closeness_f1: f64,
}

impl NegativeSample {
    /// Computes the closeness F1 and checks `tau <= f1 < 1`.
    pub fn new(
        sentence: AnnotatedSentence,
        wrong_prediction: PredictionSet,
        gold: PredictionSet,
        tau: f64,
    ) -> Result<Self, MiningError> {
        let invalid = |message: String| MiningError::InvalidSample {
            id: sentence.id.clone(),
            message,
        };
        if wrong_prediction == gold {
            return Err(invalid("prediction equals gold".into()));
        }
        let f1 = sample_f1(&wrong_prediction, &gold);
        if !(tau..1.0).contains(&f1) {
            return Err(invalid(format!("closeness F1 {f1} outside [{tau}, 1)")));
        }
        Ok(NegativeSample {
            sentence,
            wrong_prediction,
            gold,
            closeness_f1: f1,
        })
    }
}

/// Micro F1 between two element sets; two empty sets score 1.
pub fn sample_f1(prediction: &PredictionSet, gold: &PredictionSet) -> f64 {
    sentence_f1(prediction, gold)
}

/// Elements present in at least `ceil(n / 2)` of the `n` prediction sets.
/// The output keeps first-appearance order.
pub fn vote_consensus(predictions: &[PredictionSet]) -> PredictionSet {
    let task = predictions.first().map(|p| p.task).unwrap_or(Task::Ner);
    let threshold = predictions.len().div_ceil(2);
    let mut out = PredictionSet::empty(task);
    match task {
        Task::Ner => {
            let mut votes: HashMap<&EntityMention, usize> = HashMap::new();
            let mut order: Vec<&EntityMention> = Vec::new();
            for p in predictions {
                for m in &p.entities {
                    let c = votes.entry(m).or_insert_with(|| {
                        order.push(m);
                        0
                    });
                    *c += 1;
                }
            }
            out.entities
                .extend(order.into_iter().filter(|m| votes[m] >= threshold).cloned());
        }
        Task::Re => {
            let mut votes: HashMap<&RelationTriple, usize> = HashMap::new();
            let mut order: Vec<&RelationTriple> = Vec::new();
            for p in predictions {
                for t in &p.triples {
                    let c = votes.entry(t).or_insert_with(|| {
                        order.push(t);
                        0
                    });
                    *c += 1;
                }
            }
            out.triples
                .extend(order.into_iter().filter(|t| votes[t] >= threshold).cloned());
        }
    }
    out
}

/// One parsed answer plus the raw text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub prediction: PredictionSet,
    pub diagnostics: ParseDiagnostics,
    pub raw: String,
}

/// Sends `prompt` `n` times; query `i` uses seed `params.seed + i`.
/// Any gateway failure fails the whole call.
pub fn query_n_times(
    prompt: &str,
    task: Task,
    llm: &dyn LlmGateway,
    n: usize,
    params: &SamplingParams,
) -> Result<Vec<QueryOutcome>, GatewayError> {
    (0..n as u64)
        .map(|i| {
            let completion = llm.complete(prompt, &params.with_seed(params.seed.wrapping_add(i)))?;
            let body = strip_echo(&completion.text, prompt);
            let (prediction, diagnostics) = parse_output(body, task);
            Ok(QueryOutcome {
                prediction,
                diagnostics,
                raw: completion.text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ranking {
    /// Descending closeness F1, ties by corpus order.
    Closeness,
    /// Seeded shuffle of the accepted samples.
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct MiningConfig {
    pub votes: usize,
    pub tau: f64,
    pub limit: usize,
    pub params: SamplingParams,
    pub ranking: Ranking,
    pub max_in_flight: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            votes: 3,
            tau: 0.5,
            limit: 200,
            params: SamplingParams::default(),
            ranking: Ranking::Closeness,
            max_in_flight: 4,
        }
    }
}

/// Raw generations for one mined sentence, kept for replay and audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedGeneration {
    pub id: String,
    pub prompt_sha256: String,
    pub generations: Vec<String>,
    pub consensus: PredictionSet,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub negatives: Vec<NegativeSample>,
    pub generations: Vec<MinedGeneration>,
    /// Set when nothing fell inside the band.
    pub warning: Option<String>,
}

/// Mines negatives from the annotated sentences of `pool`.
///
/// `prompt_for` builds the query prompt for a sentence (positives only).
/// Sentences are processed concurrently; results are collected in corpus
/// order so the outcome does not depend on scheduling.
pub fn mine_hard_negatives(
    pool: &Corpus,
    llm: &dyn LlmGateway,
    config: &MiningConfig,
    prompt_for: &(dyn Fn(&AnnotatedSentence) -> Result<String, String> + Sync),
) -> Result<MiningOutcome, MiningError> {
    if !(0.0..1.0).contains(&config.tau) {
        return Err(MiningError::BadTau(config.tau));
    }
    if config.votes == 0 {
        return Err(MiningError::ZeroVotes);
    }
    let task = pool.task();
    let candidates: Vec<(usize, &AnnotatedSentence)> = pool
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_annotations(task))
        .collect();

    type Slot = Option<Result<(MinedGeneration, Option<NegativeSample>), MiningError>>;
    let slots: Vec<Mutex<Slot>> = candidates.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = config.max_in_flight.max(1).min(candidates.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(_, sentence)) = candidates.get(i) else { break };
                let result = mine_one(sentence, task, llm, config, prompt_for);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut generations = Vec::new();
    let mut accepted: Vec<(usize, NegativeSample)> = Vec::new();
    for (slot, &(position, _)) in slots.into_iter().zip(&candidates) {
        match slot.into_inner().unwrap() {
            Some(Ok((generation, negative))) => {
                generations.push(generation);
                if let Some(n) = negative {
                    accepted.push((position, n));
                }
            }
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    match config.ranking {
        Ranking::Closeness => {
            accepted.sort_by(|a, b| b.1.closeness_f1.total_cmp(&a.1.closeness_f1).then(a.0.cmp(&b.0)))
        }
        Ranking::Random(seed) => accepted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    accepted.truncate(config.limit);
    let warning = accepted.is_empty().then(|| {
        tracing::warn!("no hard negatives found in the F1 band");
        format!("no sample fell inside the F1 band [{}, 1)", config.tau)
    });
    Ok(MiningOutcome {
        negatives: accepted.into_iter().map(|(_, n)| n).collect(),
        generations,
        warning,
    })
}

fn mine_one(
    sentence: &AnnotatedSentence,
    task: Task,
    llm: &dyn LlmGateway,
    config: &MiningConfig,
    prompt_for: &(dyn Fn(&AnnotatedSentence) -> Result<String, String> + Sync),
) -> Result<(MinedGeneration, Option<NegativeSample>), MiningError> {
    let prompt = prompt_for(sentence).map_err(|message| MiningError::Prompt {
        id: sentence.id.clone(),
        message,
    })?;
    let outcomes = query_n_times(&prompt, task, llm, config.votes, &config.params).map_err(|source| {
        MiningError::Gateway {
            id: sentence.id.clone(),
            source,
        }
    })?;
    let predictions: Vec<PredictionSet> = outcomes.iter().map(|o| o.prediction.clone()).collect();
    let consensus = vote_consensus(&predictions);
    let gold = PredictionSet::gold(sentence, task);
    let f1 = sample_f1(&consensus, &gold);
    let negative = NegativeSample::new(sentence.clone(), consensus.clone(), gold, config.tau).ok();
    Ok((
        MinedGeneration {
            id: sentence.id.clone(),
            prompt_sha256: crate::gateway::prompt_sha256(&prompt),
            generations: outcomes.into_iter().map(|o| o.raw).collect(),
            consensus,
            f1,
        },
        negative,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct BankLine {
    id: String,
    wrong: PredictionSet,
    gold: PredictionSet,
    f1: f64,
}

/// Writes the negative bank as JSONL `{"id", "wrong", "gold", "f1"}`.
pub fn write_negative_bank(path: impl AsRef<Path>, negatives: &[NegativeSample]) -> Result<(), MiningError> {
    let path = path.as_ref();
    let err = |e: std::io::Error| MiningError::Bank {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(err)?);
    for n in negatives {
        let line = BankLine {
            id: n.sentence.id.clone(),
            wrong: n.wrong_prediction.clone(),
            gold: n.gold.clone(),
            f1: n.closeness_f1,
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("bank line serializes")).map_err(err)?;
    }
    out.flush().map_err(err)
}

/// Reads a negative bank, resolving sentences by id against `pool`.
/// Stored F1 values are re-checked against the stored sets.
pub fn read_negative_bank(path: impl AsRef<Path>, pool: &Corpus) -> Result<Vec<NegativeSample>, MiningError> {
    let path = path.as_ref();
    let err = |message: String| MiningError::Bank {
        path: path.display().to_string(),
        message,
    };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BankLine = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        let sentence = pool
            .get(&rec.id)
            .ok_or_else(|| err(format!("line {}: unknown sentence id {}", i + 1, rec.id)))?;
        let sample = NegativeSample::new(sentence.clone(), rec.wrong, rec.gold, 0.0)?;
        if (sample.closeness_f1 - rec.f1).abs() > 1e-9 {
            return Err(err(format!(
                "line {}: stored f1 {} disagrees with recomputed {}",
                i + 1,
                rec.f1,
                sample.closeness_f1
            )));
        }
        out.push(sample);
    }
    Ok(out)
}
