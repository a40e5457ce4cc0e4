//! Exact-match scoring and error categories.

use std::collections::{BTreeMap, HashSet};
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityMention, RelationTriple, Task, TypeSchema};
use crate::parsing::PredictionSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("task mismatch: expected {expected:?}, got {found:?}")]
    TaskMismatch { expected: Task, found: Task },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// Micro precision/recall/F1 with per-label counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, Counts>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, per_type: BTreeMap<String, Counts>) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            per_type,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    /// Unweighted mean F1 over labels, reported alongside the micro score.
    pub fn macro_f1(&self) -> f64 {
        if self.per_type.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .per_type
            .values()
            .map(|c| Metrics::from_counts(c.tp, c.fp, c.fn_, BTreeMap::new()).f1)
            .sum();
        sum / self.per_type.len() as f64
    }
}

type EntityKey = (String, String);
type TripleKey = (String, String, String, String, String);

fn entity_key(m: &EntityMention) -> EntityKey {
    (m.span.trim().to_string(), m.entity_type.trim().to_string())
}

fn triple_key(t: &RelationTriple) -> TripleKey {
    (
        t.head.span.trim().to_string(),
        t.head.entity_type.trim().to_string(),
        t.relation.trim().to_string(),
        t.tail.span.trim().to_string(),
        t.tail.entity_type.trim().to_string(),
    )
}

fn check_task(expected: Task, set: &PredictionSet) -> Result<(), EvalError> {
    if set.task != expected {
        return Err(EvalError::TaskMismatch {
            expected,
            found: set.task,
        });
    }
    Ok(())
}

fn score_keys<K: std::hash::Hash + Eq + Clone>(
    pred: impl Iterator<Item = (K, String)>,
    gold: impl Iterator<Item = (K, String)>,
) -> Metrics {
    let pred: Vec<(K, String)> = dedup(pred);
    let gold: Vec<(K, String)> = dedup(gold);
    let gold_keys: HashSet<&K> = gold.iter().map(|(k, _)| k).collect();
    let pred_keys: HashSet<&K> = pred.iter().map(|(k, _)| k).collect();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (k, label) in &pred {
        let c = per_type.entry(label.clone()).or_default();
        if gold_keys.contains(k) {
            tp += 1;
            c.tp += 1;
        } else {
            fp += 1;
            c.fp += 1;
        }
    }
    for (k, label) in &gold {
        if !pred_keys.contains(k) {
            fn_ += 1;
            per_type.entry(label.clone()).or_default().fn_ += 1;
        }
    }
    Metrics::from_counts(tp, fp, fn_, per_type)
}

fn dedup<K: std::hash::Hash + Eq + Clone>(items: impl Iterator<Item = (K, String)>) -> Vec<(K, String)> {
    let mut seen = HashSet::new();
    items.filter(|(k, _)| seen.insert(k.clone())).collect()
}

/// Exact (span, type) matching; per-type counts are keyed by entity type.
pub fn entity_f1(pred: &PredictionSet, gold: &PredictionSet) -> Result<Metrics, EvalError> {
    check_task(Task::Ner, pred)?;
    check_task(Task::Ner, gold)?;
    let keyed = |set: &PredictionSet| {
        set.entities
            .iter()
            .map(|m| {
                let k = entity_key(m);
                let label = k.1.clone();
                (k, label)
            })
            .collect::<Vec<_>>()
    };
    Ok(score_keys(keyed(pred).into_iter(), keyed(gold).into_iter()))
}

/// Strict matching: relation, both spans and both entity types must agree.
/// Per-type counts are keyed by relation label.
pub fn relation_strict_f1(pred: &PredictionSet, gold: &PredictionSet) -> Result<Metrics, EvalError> {
    check_task(Task::Re, pred)?;
    check_task(Task::Re, gold)?;
    let keyed = |set: &PredictionSet| {
        set.triples
            .iter()
            .map(|t| {
                let k = triple_key(t);
                let label = k.2.clone();
                (k, label)
            })
            .collect::<Vec<_>>()
    };
    Ok(score_keys(keyed(pred).into_iter(), keyed(gold).into_iter()))
}

/// Dispatches on the gold set's task.
pub fn score(pred: &PredictionSet, gold: &PredictionSet) -> Result<Metrics, EvalError> {
    match gold.task {
        Task::Ner => entity_f1(pred, gold),
        Task::Re => relation_strict_f1(pred, gold),
    }
}

/// Sentence-level F1; two empty sets agree perfectly.
pub fn sentence_f1(pred: &PredictionSet, gold: &PredictionSet) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    match score(pred, gold) {
        Ok(m) => m.f1,
        Err(_) => 0.0,
    }
}

pub fn aggregate_metrics(per_sentence: &[Metrics]) -> Metrics {
    let mut total = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for m in per_sentence {
        total += m.counts();
        for (label, c) in &m.per_type {
            *per_type.entry(label.clone()).or_default() += *c;
        }
    }
    Metrics::from_counts(total.tp, total.fp, total.fn_, per_type)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub entity_type_errors: usize,
    pub entity_span_errors: usize,
    pub relation_type_errors: usize,
}

impl Add for ErrorCounts {
    type Output = ErrorCounts;

    fn add(self, rhs: Self) -> Self {
        ErrorCounts {
            entity_type_errors: self.entity_type_errors + rhs.entity_type_errors,
            entity_span_errors: self.entity_span_errors + rhs.entity_span_errors,
            relation_type_errors: self.relation_type_errors + rhs.relation_type_errors,
        }
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Counts predictions outside the schema or not grounded in the text.
///
/// For RE the entity categories are counted over the distinct mentions used
/// as triple arguments.
pub fn categorize_errors(pred: &PredictionSet, sentence_text: &str, schema: &TypeSchema) -> ErrorCounts {
    let mut counts = ErrorCounts::default();
    let mut mentions: Vec<EntityKey> = Vec::new();
    let mut push = |m: &EntityMention| {
        let k = entity_key(m);
        if !mentions.contains(&k) {
            mentions.push(k);
        }
    };
    match pred.task {
        Task::Ner => pred.entities.iter().for_each(&mut push),
        Task::Re => {
            for t in &pred.triples {
                push(&t.head);
                push(&t.tail);
                if !schema.has_relation_type(&t.relation) {
                    counts.relation_type_errors += 1;
                }
            }
        }
    }
    for (span, ty) in &mentions {
        if !schema.has_entity_type(ty) {
            counts.entity_type_errors += 1;
        }
        if span.is_empty() || !sentence_text.contains(span.as_str()) {
            counts.entity_span_errors += 1;
        }
    }
    counts
}

/// Mean and sample standard deviation (n - 1); zero spread for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
