//! Data model for annotated NER/RE corpora.
//!
//! Sentences carry gold mentions as surface strings. Relations on disk refer
//! to entities by index into the sentence's entity list, so a triple always
//! shares mention identity with an entity of the same sentence.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence {id}: invalid field `{field}`: {message}")]
    Invalid {
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Re,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::Re => "re",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Entity and relation label inventories for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TypeSchema {
    pub task: Task,
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

#[derive(Deserialize)]
struct RawSchema {
    task: Task,
    entity_types: Vec<String>,
    #[serde(default)]
    relation_types: Vec<String>,
}

impl<'de> Deserialize<'de> for TypeSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawSchema::deserialize(deserializer)?;
        TypeSchema::new(raw.task, raw.entity_types, raw.relation_types)
            .map_err(serde::de::Error::custom)
    }
}

impl TypeSchema {
    pub fn new<S: Into<String>, R: Into<String>>(
        task: Task,
        entity_types: impl IntoIterator<Item = S>,
        relation_types: impl IntoIterator<Item = R>,
    ) -> Result<Self, CorpusError> {
        let entity_types = normalize_labels(entity_types, "entity")?;
        let relation_types = normalize_labels(relation_types, "relation")?;
        if entity_types.is_empty() {
            return Err(CorpusError::Schema("entity type set is empty".into()));
        }
        match task {
            Task::Ner if !relation_types.is_empty() => Err(CorpusError::Schema(
                "NER schema must not declare relation types".into(),
            )),
            Task::Re if relation_types.is_empty() => Err(CorpusError::Schema(
                "RE schema needs at least one relation type".into(),
            )),
            _ => Ok(TypeSchema {
                task,
                entity_types,
                relation_types,
            }),
        }
    }

    pub fn ner<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self, CorpusError> {
        Self::new(Task::Ner, entity_types, Vec::<String>::new())
    }

    pub fn re<S: Into<String>>(
        entity_types: impl IntoIterator<Item = S>,
        relation_types: impl IntoIterator<Item = S>,
    ) -> Result<Self, CorpusError> {
        Self::new(Task::Re, entity_types, relation_types)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CorpusError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text + "\n").map_err(|e| CorpusError::io(path, e))
    }

    pub fn has_entity_type(&self, label: &str) -> bool {
        let label = label.trim();
        self.entity_types.iter().any(|t| t == label)
    }

    pub fn has_relation_type(&self, label: &str) -> bool {
        let label = label.trim();
        self.relation_types.iter().any(|r| r == label)
    }
}

fn normalize_labels<S: Into<String>>(
    labels: impl IntoIterator<Item = S>,
    kind: &str,
) -> Result<Vec<String>, CorpusError> {
    let mut out: Vec<String> = Vec::new();
    for label in labels {
        let label = label.into().trim().to_string();
        if label.is_empty() {
            return Err(CorpusError::Schema(format!("empty {kind} type label")));
        }
        if out.contains(&label) {
            return Err(CorpusError::Schema(format!("duplicate {kind} type `{label}`")));
        }
        out.push(label);
    }
    Ok(out)
}

/// A typed surface-form mention. Both fields are whitespace-trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub span: String,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl EntityMention {
    pub fn new(span: impl AsRef<str>, entity_type: impl AsRef<str>) -> Self {
        EntityMention {
            span: span.as_ref().trim().to_string(),
            entity_type: entity_type.as_ref().trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriple {
    pub head: EntityMention,
    pub relation: String,
    pub tail: EntityMention,
}

impl RelationTriple {
    pub fn new(head: EntityMention, relation: impl AsRef<str>, tail: EntityMention) -> Self {
        RelationTriple {
            head,
            relation: relation.as_ref().trim().to_string(),
            tail,
        }
    }
}

/// One sentence with its gold annotation. Entities and relations keep corpus
/// order; duplicates are collapsed on insertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub id: String,
    pub text: String,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationTriple>,
}

impl AnnotatedSentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        AnnotatedSentence {
            id: id.into(),
            text: text.into(),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn with_entity(mut self, span: &str, entity_type: &str) -> Self {
        self.add_entity(EntityMention::new(span, entity_type));
        self
    }

    /// Adds a triple, registering both arguments as entities if missing.
    pub fn with_relation(mut self, head: (&str, &str), relation: &str, tail: (&str, &str)) -> Self {
        let head = EntityMention::new(head.0, head.1);
        let tail = EntityMention::new(tail.0, tail.1);
        self.add_entity(head.clone());
        self.add_entity(tail.clone());
        let triple = RelationTriple::new(head, relation, tail);
        if !self.relations.contains(&triple) {
            self.relations.push(triple);
        }
        self
    }

    /// Returns the index of the mention, inserting it if it is new.
    pub fn add_entity(&mut self, mention: EntityMention) -> usize {
        match self.entities.iter().position(|m| *m == mention) {
            Some(i) => i,
            None => {
                self.entities.push(mention);
                self.entities.len() - 1
            }
        }
    }

    /// Whether the sentence has at least one gold element for `task`.
    pub fn has_annotations(&self, task: Task) -> bool {
        match task {
            Task::Ner => !self.entities.is_empty(),
            Task::Re => !self.relations.is_empty(),
        }
    }

    /// Checks the structural invariants and, when given, schema membership.
    pub fn validate(&self, schema: Option<&TypeSchema>) -> Result<(), CorpusError> {
        let invalid = |field, message: String| CorpusError::Invalid {
            id: self.id.clone(),
            field,
            message,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id", "empty sentence id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(invalid("text", "empty text".into()));
        }
        for m in &self.entities {
            if m.span.is_empty() {
                return Err(invalid("entities", "empty entity span".into()));
            }
            if !self.text.contains(&m.span) {
                return Err(invalid(
                    "entities",
                    format!("span `{}` does not occur in text", m.span),
                ));
            }
            if let Some(schema) = schema {
                if !schema.has_entity_type(&m.entity_type) {
                    return Err(invalid(
                        "entities",
                        format!("entity type `{}` is not in the schema", m.entity_type),
                    ));
                }
            }
        }
        if let Some(schema) = schema {
            if schema.task == Task::Ner && !self.relations.is_empty() {
                return Err(invalid("relations", "relations present in an NER corpus".into()));
            }
        }
        for r in &self.relations {
            for arg in [&r.head, &r.tail] {
                if !self.entities.contains(arg) {
                    return Err(invalid(
                        "relations",
                        format!("argument `{}` is not among the entities", arg.span),
                    ));
                }
            }
            if let Some(schema) = schema {
                if !schema.has_relation_type(&r.relation) {
                    return Err(invalid(
                        "relations",
                        format!("relation type `{}` is not in the schema", r.relation),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEntity {
    span: String,
    #[serde(rename = "type")]
    entity_type: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRelation {
    head: usize,
    #[serde(rename = "type")]
    relation: String,
    tail: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSentence {
    id: String,
    text: String,
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(default)]
    relations: Vec<RawRelation>,
}

impl RawSentence {
    fn into_sentence(self) -> Result<AnnotatedSentence, CorpusError> {
        let mut sentence = AnnotatedSentence::new(self.id, self.text);
        // Raw index -> deduplicated index.
        let mut remap = Vec::with_capacity(self.entities.len());
        for e in self.entities {
            remap.push(sentence.add_entity(EntityMention::new(e.span, e.entity_type)));
        }
        for r in self.relations {
            let lookup = |idx: usize| {
                remap.get(idx).copied().ok_or_else(|| CorpusError::Invalid {
                    id: sentence.id.clone(),
                    field: "relations",
                    message: format!("entity index {idx} out of range"),
                })
            };
            let head = sentence.entities[lookup(r.head)?].clone();
            let tail = sentence.entities[lookup(r.tail)?].clone();
            let triple = RelationTriple::new(head, r.relation, tail);
            if !sentence.relations.contains(&triple) {
                sentence.relations.push(triple);
            }
        }
        Ok(sentence)
    }

    fn from_sentence(s: &AnnotatedSentence) -> Self {
        let index_of = |m: &EntityMention| {
            s.entities
                .iter()
                .position(|e| e == m)
                .expect("relation arguments are registered entities")
        };
        RawSentence {
            id: s.id.clone(),
            text: s.text.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| RawEntity {
                    span: e.span.clone(),
                    entity_type: e.entity_type.clone(),
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| RawRelation {
                    head: index_of(&r.head),
                    relation: r.relation.clone(),
                    tail: index_of(&r.tail),
                })
                .collect(),
        }
    }
}

/// Serializes one sentence in the canonical JSONL record shape.
pub fn sentence_to_json(sentence: &AnnotatedSentence) -> String {
    serde_json::to_string(&RawSentence::from_sentence(sentence)).expect("sentence serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: TypeSchema,
    pub split: Split,
    pub sentences: Vec<AnnotatedSentence>,
}

impl Corpus {
    /// Builds a corpus after validating every sentence and id uniqueness.
    pub fn new(
        schema: TypeSchema,
        split: Split,
        sentences: Vec<AnnotatedSentence>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for s in &sentences {
            s.validate(Some(&schema))?;
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::Invalid {
                    id: s.id.clone(),
                    field: "id",
                    message: "duplicate sentence id".into(),
                });
            }
        }
        Ok(Corpus {
            schema,
            split,
            sentences,
        })
    }

    pub fn task(&self) -> Task {
        self.schema.task
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedSentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.sentences.iter().position(|s| s.id == id)
    }

    /// Keeps only the first `n` sentences.
    pub fn truncated(mut self, n: usize) -> Self {
        self.sentences.truncate(n);
        self
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for s in &self.sentences {
            writeln!(out, "{}", sentence_to_json(s)).map_err(|e| CorpusError::io(path, e))?;
        }
        out.flush().map_err(|e| CorpusError::io(path, e))
    }
}

pub fn load_jsonl(
    path: impl AsRef<Path>,
    schema: &TypeSchema,
    split: Split,
) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_jsonl(BufReader::new(file), schema, split).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

/// Reads canonical JSONL records from any reader; blank lines are ignored.
pub fn read_jsonl(
    reader: impl BufRead,
    schema: &TypeSchema,
    split: Split,
) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: "<reader>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSentence = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        sentences.push(raw.into_sentence()?);
    }
    Corpus::new(schema.clone(), split, sentences)
}

/// Exact counts over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub entities: usize,
    pub relations: usize,
    pub entity_types: BTreeMap<String, usize>,
    pub relation_types: BTreeMap<String, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        sentences: corpus.sentences.len(),
        ..CorpusStats::default()
    };
    for s in &corpus.sentences {
        stats.entities += s.entities.len();
        stats.relations += s.relations.len();
        for e in &s.entities {
            *stats.entity_types.entry(e.entity_type.clone()).or_default() += 1;
        }
        for r in &s.relations {
            *stats.relation_types.entry(r.relation.clone()).or_default() += 1;
        }
    }
    stats
}

/// Result of decoding a BIO column file.
#[derive(Debug, Clone)]
pub struct BioConversion {
    pub corpus: Corpus,
    /// Mentions decoded before per-sentence deduplication.
    pub decoded_mentions: usize,
    pub tokens: usize,
    pub warnings: Vec<String>,
}

/// Converts a CoNLL-style column file (token first, BIO tag last) to a corpus.
///
/// Sentence ids are `<prefix>-<n>` with `n` counting from 0. `-DOCSTART-`
/// pseudo-sentences are dropped. The schema lists entity types in order of
/// first appearance.
pub fn convert_conll_bio(path: impl AsRef<Path>, split: Split) -> Result<BioConversion, CorpusError> {
    let path = path.as_ref();
    let prefix = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "s".into());
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    decode_bio(BufReader::new(file), &prefix, split).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

pub fn decode_bio(reader: impl BufRead, prefix: &str, split: Split) -> Result<BioConversion, CorpusError> {
    let mut rows: Vec<(String, String, usize)> = Vec::new();
    let mut blocks: Vec<Vec<(String, String, usize)>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: "<reader>".into(),
            source: e,
        })?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if !rows.is_empty() {
                blocks.push(std::mem::take(&mut rows));
            }
            continue;
        }
        if cols.len() < 2 {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: "expected at least a token column and a tag column".into(),
            });
        }
        rows.push((cols[0].to_string(), cols[cols.len() - 1].to_string(), i + 1));
    }
    if !rows.is_empty() {
        blocks.push(rows);
    }

    let mut types: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    let mut sentences = Vec::new();
    let mut decoded_mentions = 0;
    let mut tokens = 0;
    for block in blocks {
        if block[0].0 == "-DOCSTART-" {
            continue;
        }
        let id = format!("{prefix}-{}", sentences.len());
        let words: Vec<&str> = block.iter().map(|(w, _, _)| w.as_str()).collect();
        tokens += words.len();
        let mut sentence = AnnotatedSentence::new(id.clone(), words.join(" "));
        // (start token, end token exclusive, type)
        let mut open: Option<(usize, String)> = None;
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (t, (_, tag, line_no)) in block.iter().enumerate() {
            let (prefix_tag, label) = match tag.split_once('-') {
                Some((p, l)) if matches!(p, "B" | "I") && !l.is_empty() => (p, l),
                _ if tag == "O" => ("O", ""),
                _ => {
                    return Err(CorpusError::Malformed {
                        line: *line_no,
                        message: format!("unrecognized tag `{tag}`"),
                    })
                }
            };
            let continues = prefix_tag == "I" && matches!(&open, Some((_, l)) if l == label);
            if continues {
                continue;
            }
            if let Some((start, l)) = open.take() {
                spans.push((start, t, l));
            }
            match prefix_tag {
                "B" => open = Some((t, label.to_string())),
                "I" => {
                    warnings.push(format!(
                        "line {line_no}: dangling I-{label} in sentence {id} treated as B-{label}"
                    ));
                    open = Some((t, label.to_string()));
                }
                _ => {}
            }
        }
        if let Some((start, l)) = open.take() {
            spans.push((start, block.len(), l));
        }
        for (start, end, label) in spans {
            if !types.contains(&label) {
                types.push(label.clone());
            }
            decoded_mentions += 1;
            sentence.add_entity(EntityMention::new(words[start..end].join(" "), label));
        }
        sentences.push(sentence);
    }
    if types.is_empty() {
        // An all-O file still needs a valid schema.
        types.push("MISC".into());
    }
    let schema = TypeSchema::ner(types)?;
    Ok(BioConversion {
        corpus: Corpus::new(schema, split, sentences)?,
        decoded_mentions,
        tokens,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn org_schema() -> TypeSchema {
        TypeSchema::re(["person", "organization", "location"], ["Work For", "Live In"]).unwrap()
    }

    #[test]
    fn loads_canonical_record() {
        let line = r#"{"id":"s1","text":"Steve works at Apple","entities":[{"span":"Steve","type":"person"},{"span":"Apple","type":"organization"}],"relations":[{"head":0,"type":"Work For","tail":1}]}"#;
        let corpus = read_jsonl(line.as_bytes(), &org_schema(), Split::Train).unwrap();
        assert_eq!(corpus.len(), 1);
        let s = &corpus.sentences[0];
        assert_eq!(s.entities.len(), 2);
        assert_eq!(s.relations.len(), 1);
        assert_eq!(s.relations[0].head, EntityMention::new("Steve", "person"));
        assert_eq!(s.relations[0].relation, "Work For");
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let corpus = read_jsonl("".as_bytes(), &org_schema(), Split::Test).unwrap();
        assert!(corpus.is_empty());
        assert_eq!(corpus_stats(&corpus), CorpusStats::default());
    }

    #[test]
    fn out_of_schema_type_is_named() {
        let schema = TypeSchema::ner(["person", "organization", "location"]).unwrap();
        let line = r#"{"id":"s9","text":"Paris is nice","entities":[{"span":"Paris","type":"city"}]}"#;
        let err = read_jsonl(line.as_bytes(), &schema, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("city"), "{msg}");
        assert!(msg.contains("s9"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let schema = TypeSchema::ner(["person"]).unwrap();
        let text = "{\"id\":\"a\",\"text\":\"Bob\",\"entities\":[]}\n{not json\n";
        match read_jsonl(text.as_bytes(), &schema, Split::Train).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn span_must_be_extractive() {
        let schema = TypeSchema::ner(["person"]).unwrap();
        let line = r#"{"id":"a","text":"Bob left","entities":[{"span":"Alice","type":"person"}]}"#;
        assert!(read_jsonl(line.as_bytes(), &schema, Split::Train).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let schema = TypeSchema::ner(["person"]).unwrap();
        let text = "{\"id\":\"a\",\"text\":\"Bob\"}\n{\"id\":\"a\",\"text\":\"Bob\"}\n";
        let err = read_jsonl(text.as_bytes(), &schema, Split::Train).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn relation_index_out_of_range() {
        let line = r#"{"id":"s1","text":"Steve works","entities":[{"span":"Steve","type":"person"}],"relations":[{"head":0,"type":"Work For","tail":3}]}"#;
        assert!(read_jsonl(line.as_bytes(), &org_schema(), Split::Train).is_err());
    }

    #[test]
    fn duplicate_surface_forms_collapse() {
        let schema = TypeSchema::ner(["ORG"]).unwrap();
        let line = r#"{"id":"a","text":"EU and EU","entities":[{"span":"EU","type":"ORG"},{"span":" EU ","type":"ORG"}]}"#;
        let c = read_jsonl(line.as_bytes(), &schema, Split::Train).unwrap();
        assert_eq!(c.sentences[0].entities.len(), 1);
    }

    #[test]
    fn schema_invariants() {
        assert!(TypeSchema::ner(Vec::<String>::new()).is_err());
        assert!(TypeSchema::ner(["a", "a"]).is_err());
        assert!(TypeSchema::new(Task::Ner, ["a"], ["r"]).is_err());
        assert!(TypeSchema::new(Task::Re, ["a"], Vec::<&str>::new()).is_err());
        let s: TypeSchema =
            serde_json::from_str(r#"{"task":"re","entity_types":["a"],"relation_types":["r"]}"#).unwrap();
        assert_eq!(s.task, Task::Re);
        assert!(serde_json::from_str::<TypeSchema>(r#"{"task":"ner","entity_types":[]}"#).is_err());
    }

    #[test]
    fn bio_basic_decoding() {
        let text = "EU B-ORG\nrejects O\nGerman B-MISC\ncall O\n";
        let conv = decode_bio(text.as_bytes(), "t", Split::Train).unwrap();
        let s = &conv.corpus.sentences[0];
        assert_eq!(s.text, "EU rejects German call");
        assert_eq!(
            s.entities,
            vec![EntityMention::new("EU", "ORG"), EntityMention::new("German", "MISC")]
        );
        assert!(conv.warnings.is_empty());
    }

    #[test]
    fn bio_all_outside_and_runs() {
        let text = "The\tO\ncat\tO\n\nJohn NNP B-PER\nSmith NNP I-PER\n";
        let conv = decode_bio(text.as_bytes(), "t", Split::Train).unwrap();
        assert_eq!(conv.corpus.len(), 2);
        assert!(conv.corpus.sentences[0].entities.is_empty());
        assert_eq!(
            conv.corpus.sentences[1].entities,
            vec![EntityMention::new("John Smith", "PER")]
        );
    }

    #[test]
    fn bio_dangling_inside_is_repaired() {
        let text = "in O\nNew I-LOC\nYork I-LOC\nand O\nBonn I-LOC\nBerlin B-PER\n";
        let conv = decode_bio(text.as_bytes(), "t", Split::Train).unwrap();
        let s = &conv.corpus.sentences[0];
        assert_eq!(
            s.entities,
            vec![
                EntityMention::new("New York", "LOC"),
                EntityMention::new("Bonn", "LOC"),
                EntityMention::new("Berlin", "PER"),
            ]
        );
        assert_eq!(conv.warnings.len(), 2);
        assert_eq!(conv.decoded_mentions, 1 + 2);
    }

    #[test]
    fn bio_type_switch_inside_run_starts_new_mention() {
        let text = "A B-PER\nB I-ORG\n";
        let conv = decode_bio(text.as_bytes(), "t", Split::Train).unwrap();
        assert_eq!(conv.corpus.sentences[0].entities.len(), 2);
        assert_eq!(conv.warnings.len(), 1);
    }

    #[test]
    fn bio_skips_docstart() {
        let text = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\n\n";
        let conv = decode_bio(text.as_bytes(), "t", Split::Train).unwrap();
        assert_eq!(conv.corpus.len(), 1);
        assert_eq!(conv.corpus.sentences[0].id, "t-0");
    }

    #[test]
    fn bio_rejects_unknown_tag() {
        assert!(decode_bio("x Q-PER\n".as_bytes(), "t", Split::Train).is_err());
    }

    #[test]
    fn stats_histograms_sum_to_totals() {
        let schema = org_schema();
        let s = AnnotatedSentence::new("a", "Steve works at Apple in Cupertino")
            .with_relation(("Steve", "person"), "Work For", ("Apple", "organization"))
            .with_entity("Cupertino", "location");
        let corpus = Corpus::new(schema, Split::Train, vec![s]).unwrap();
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.sentences, 1);
        assert_eq!(stats.entities, 3);
        assert_eq!(stats.relations, 1);
        assert_eq!(stats.entity_types.values().sum::<usize>(), stats.entities);
        assert_eq!(stats.relation_types.values().sum::<usize>(), stats.relations);
    }
}
