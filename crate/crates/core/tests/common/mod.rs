//! Fixture loaders and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cicl_core::corpus::{load_jsonl, AnnotatedSentence, Corpus, EntityMention, Split, Task, TypeSchema};
use cicl_core::gateway::SamplingParams;
use cicl_core::mining::NegativeSample;
use cicl_core::orchestrator::{Experiment, ExperimentConfig};
use cicl_core::parsing::PredictionSet;
use cicl_core::prompting::{assemble_prompt, render_test_stub, DemoOrder, Demonstration};
use cicl_core::retrieval::{embed_sentences, EmbedOptions, EmbeddingCache, HashEmbeddingProvider};
use rand::Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn load_pair(prefix: &str) -> (Corpus, Corpus) {
    let dir = fixtures();
    let schema = TypeSchema::from_json_file(dir.join(format!("{prefix}_schema.json"))).unwrap();
    let train = load_jsonl(dir.join(format!("{prefix}_train.jsonl")), &schema, Split::Train).unwrap();
    let test = load_jsonl(dir.join(format!("{prefix}_test.jsonl")), &schema, Split::Test).unwrap();
    (train, test)
}

pub fn ner() -> (Corpus, Corpus) {
    load_pair("ner")
}

pub fn re() -> (Corpus, Corpus) {
    load_pair("re")
}

pub fn config(output_dir: &Path, shot_total: usize, n_negatives: usize) -> ExperimentConfig {
    ExperimentConfig {
        shot_total,
        n_negatives,
        tau: 0.3,
        mining_shots: 3,
        output_dir: output_dir.to_path_buf(),
        embedding: cicl_core::orchestrator::EmbeddingSource::Hash { dim: 64 },
        ..ExperimentConfig::default()
    }
}

pub fn experiment(pair: &(Corpus, Corpus), config: ExperimentConfig) -> Experiment {
    Experiment::from_corpora(config, pair.0.clone(), pair.1.clone()).unwrap()
}

pub fn all_sentences(pair: &(Corpus, Corpus)) -> Vec<AnnotatedSentence> {
    let mut v = pair.0.sentences.clone();
    v.extend(pair.1.sentences.iter().cloned());
    v
}

/// Moves the first element of `set` to the next label of the schema.
pub fn shift_first_type(set: PredictionSet, schema: &TypeSchema) -> PredictionSet {
    let next = |labels: &[String], cur: &str| {
        let i = labels.iter().position(|l| l == cur).unwrap();
        labels[(i + 1) % labels.len()].clone()
    };
    match set.task {
        Task::Ner => {
            let mut out: Vec<EntityMention> = set.entities.into_iter().collect();
            if let Some(first) = out.first_mut() {
                first.entity_type = next(&schema.entity_types, &first.entity_type);
            }
            PredictionSet::from_entities(out)
        }
        Task::Re => {
            let mut out: Vec<_> = set.triples.into_iter().collect();
            if let Some(first) = out.first_mut() {
                first.relation = next(&schema.relation_types, &first.relation);
            }
            PredictionSet::from_triples(out)
        }
    }
}

/// Deterministic per-call noise: drops or relabels elements depending on
/// the sampling seed. Used to make mining non-trivial.
pub fn noisy(sentence: &AnnotatedSentence, gold: PredictionSet, params: &SamplingParams, schema: &TypeSchema) -> PredictionSet {
    let key = cicl_core::orchestrator::derive_seed(params.seed, &sentence.id);
    match key % 4 {
        0 => gold,
        1 => shift_first_type(gold, schema),
        2 => match gold.task {
            Task::Ner => PredictionSet::from_entities(gold.entities.into_iter().skip(1)),
            Task::Re => PredictionSet::from_triples(gold.triples.into_iter().skip(1)),
        },
        _ => PredictionSet::empty(gold.task),
    }
}

const WORDS: &[&str] = &[
    "alpha", "Beta", "O'Neill", "\"quoted\"", "back\\slash", "tab\there", "#hash", "def", "x.append(y)", "[br]",
    "(paren)", "comma,", "Zürich", "日本", "entity_dict", "a'b\"c", "", "  ", "end.",
];

fn random_text(rng: &mut impl Rng, n_words: usize) -> Vec<String> {
    (0..n_words)
        .map(|_| {
            let w = WORDS[rng.gen_range(0..WORDS.len())];
            if w.trim().is_empty() {
                format!("w{}", rng.gen_range(0..1000))
            } else {
                w.to_string()
            }
        })
        .collect()
}

/// A random sentence whose mentions are word spans of its text.
pub fn random_sentence(rng: &mut impl Rng, id: usize, schema: &TypeSchema) -> AnnotatedSentence {
    let n_words = rng.gen_range(3..12);
    let words = random_text(rng, n_words);
    let text = format!("{} s{id}", words.join(" "));
    let mut s = AnnotatedSentence::new(format!("rand-{id}"), text);
    let pick_span = |rng: &mut dyn rand::RngCore| {
        let a = rng.gen_range(0..words.len());
        let b = rng.gen_range(a..words.len().min(a + 3));
        words[a..=b].join(" ")
    };
    let pick = |rng: &mut dyn rand::RngCore, labels: &[String]| labels[rng.gen_range(0..labels.len())].clone();
    match schema.task {
        Task::Ner => {
            for _ in 0..rng.gen_range(1..5) {
                let span = pick_span(rng);
                let ty = pick(rng, &schema.entity_types);
                s = s.with_entity(&span, &ty);
            }
        }
        Task::Re => {
            for _ in 0..rng.gen_range(1..4) {
                let (h, t) = (pick_span(rng), pick_span(rng));
                let (ht, tt) = (pick(rng, &schema.entity_types), pick(rng, &schema.entity_types));
                let r = pick(rng, &schema.relation_types);
                s = s.with_relation((&h, &ht), &r, (&t, &tt));
            }
        }
    }
    s
}

pub fn negative_for(sentence: &AnnotatedSentence, schema: &TypeSchema) -> NegativeSample {
    let gold = PredictionSet::gold(sentence, schema.task);
    let wrong = shift_first_type(gold.clone(), schema);
    NegativeSample::new(sentence.clone(), wrong, gold, 0.0).unwrap()
}

/// Golden prompt cases: file name and rendered text.
pub fn golden_cases() -> Vec<(String, String)> {
    let mut cases = Vec::new();
    for (name, pair, pos_ids, neg_id, test_id) in [
        ("ner", ner(), ["n-train-1", "n-train-3"], "n-train-8", "n-test-1"),
        ("re", re(), ["r-train-0", "r-train-2"], "r-train-4", "r-test-0"),
    ] {
        let (train, test) = &pair;
        let schema = &train.schema;
        let positives: Vec<Demonstration> = pos_ids
            .iter()
            .map(|id| Demonstration::positive(train.get(id).unwrap(), schema, None).unwrap())
            .collect();
        let neg = Demonstration::negative(&negative_for(train.get(neg_id).unwrap(), schema), schema, None).unwrap();
        let prompt = assemble_prompt(
            schema,
            &positives,
            &[neg],
            &test.get(test_id).unwrap().text,
            8192,
            DemoOrder::MostSimilarFirst,
        )
        .unwrap();
        cases.push((format!("{name}_prompt.txt"), prompt.text()));
    }

    let (train, _) = ner();
    let stub = render_test_stub("He said \"hi\" to C:\\temp\tnow", &train.schema).unwrap();
    cases.push(("ner_stub_escaping.txt".into(), stub));

    // Retrieval-driven prompt: hash embeddings, kNN positives, one negative.
    let pair = ner();
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&pair, config(dir.path(), 4, 1));
    let cache = EmbeddingCache::in_memory();
    let provider = HashEmbeddingProvider::new(64);
    let train_index = embed_sentences(&pair.0.sentences, &provider, &cache, EmbedOptions::default()).unwrap();
    let test_index = embed_sentences(&pair.1.sentences, &provider, &cache, EmbedOptions::default()).unwrap();
    let bank: Vec<NegativeSample> = ["n-train-0", "n-train-4", "n-train-10"]
        .iter()
        .map(|id| negative_for(pair.0.get(id).unwrap(), &pair.0.schema))
        .collect();
    let prompt = exp
        .build_prompt((&train_index, &test_index), &bank, 13, pair.1.get("n-test-1").unwrap())
        .unwrap();
    cases.push(("ner_knn_prompt.txt".into(), prompt.text()));
    cases
}
