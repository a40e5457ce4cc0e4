//! Code-style prompt rendering.
//!
//! A prompt is the type instruction, the positive demonstrations, the
//! negative demonstrations and finally the test stub, separated by one blank
//! line. Each demonstration is a small function whose body appends targets
//! to a result container and which is followed by a flag comment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Task, TypeSchema};
use crate::mining::NegativeSample;
use crate::parsing::{PredictionSet, NER_CONTAINER, RE_CONTAINER};

pub const RIGHT_FLAG: &str = "# Above Result: Right.";
pub const WRONG_FLAG: &str = "# Above Result: Wrong. Right Result is below:";
pub const DEFAULT_BUDGET_TOKENS: usize = 8192;

const INDENT: &str = "    ";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("sentence {0} has no gold annotation for this task")]
    NoAnnotations(String),
    #[error("negative sample {0} has a prediction equal to gold")]
    NotNegative(String),
    #[error("test text is empty")]
    EmptyTestText,
    #[error("budget of {budget} tokens cannot fit instruction and test stub ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
}

/// Escapes a string for embedding in a double-quoted literal.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn function_name(task: Task) -> &'static str {
    match task {
        Task::Ner => "named_entity_recognition",
        Task::Re => "relation_extraction",
    }
}

fn container(task: Task) -> &'static str {
    match task {
        Task::Ner => NER_CONTAINER,
        Task::Re => RE_CONTAINER,
    }
}

fn quoted_list(items: &[String]) -> String {
    let inner: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", inner.join(", "))
}

/// Comment naming the task, placed ahead of the type instruction.
pub fn render_task_comment(task: Task) -> String {
    match task {
        Task::Ner => "# Task: named entity recognition".into(),
        Task::Re => "# Task: relation extraction".into(),
    }
}

pub fn render_type_instruction(schema: &TypeSchema) -> String {
    let mut out = format!("# Given entity type set: {}", quoted_list(&schema.entity_types));
    if schema.task == Task::Re {
        out.push_str(&format!(
            "\n# Given relation type set: {}",
            quoted_list(&schema.relation_types)
        ));
    }
    out
}

/// Renders the target statements for a set of elements, in set order.
pub fn target_lines(set: &PredictionSet) -> Vec<String> {
    match set.task {
        Task::Ner => set
            .entities
            .iter()
            .map(|m| format!("{NER_CONTAINER}[{}].append({})", quote(&m.entity_type), quote(&m.span)))
            .collect(),
        Task::Re => set
            .triples
            .iter()
            .map(|t| {
                format!(
                    "{RE_CONTAINER}[{}].append([({}, {}), ({}, {})])",
                    quote(&t.relation),
                    quote(&t.head.span),
                    quote(&t.head.entity_type),
                    quote(&t.tail.span),
                    quote(&t.tail.entity_type)
                )
            })
            .collect(),
    }
}

fn header(task: Task, text: &str) -> String {
    format!("def {}(input_text={}):", function_name(task), quote(text))
}

fn init_line(task: Task) -> String {
    format!("{INDENT}{} = defaultdict(list)", container(task))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A demonstration ready for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: Task,
    pub sentence_id: String,
    pub sentence_text: String,
    pub target_lines: Vec<String>,
    pub polarity: Polarity,
    /// Present iff the demonstration is negative.
    pub correction_lines: Option<Vec<String>>,
    /// Retrieval similarity to the test sentence, when known.
    pub similarity: Option<f64>,
}

impl Demonstration {
    pub fn positive(
        sample: &AnnotatedSentence,
        schema: &TypeSchema,
        similarity: Option<f64>,
    ) -> Result<Self, PromptError> {
        if !sample.has_annotations(schema.task) {
            return Err(PromptError::NoAnnotations(sample.id.clone()));
        }
        Ok(Demonstration {
            task: schema.task,
            sentence_id: sample.id.clone(),
            sentence_text: sample.text.clone(),
            target_lines: target_lines(&PredictionSet::gold(sample, schema.task)),
            polarity: Polarity::Positive,
            correction_lines: None,
            similarity,
        })
    }

    pub fn negative(
        neg: &NegativeSample,
        schema: &TypeSchema,
        similarity: Option<f64>,
    ) -> Result<Self, PromptError> {
        if neg.wrong_prediction == neg.gold {
            return Err(PromptError::NotNegative(neg.sentence.id.clone()));
        }
        Ok(Demonstration {
            task: schema.task,
            sentence_id: neg.sentence.id.clone(),
            sentence_text: neg.sentence.text.clone(),
            target_lines: target_lines(&neg.wrong_prediction),
            polarity: Polarity::Negative,
            correction_lines: Some(target_lines(&neg.gold)),
            similarity,
        })
    }

    pub fn render(&self) -> String {
        let mut lines = vec![header(self.task, &self.sentence_text), init_line(self.task)];
        lines.extend(self.target_lines.iter().map(|l| format!("{INDENT}{l}")));
        lines.push(format!("{INDENT}return {}", container(self.task)));
        match &self.correction_lines {
            None => lines.push(RIGHT_FLAG.to_string()),
            Some(correction) => {
                lines.push(WRONG_FLAG.to_string());
                lines.extend(correction.iter().cloned());
            }
        }
        lines.join("\n")
    }
}

pub fn render_positive_demo(sample: &AnnotatedSentence, schema: &TypeSchema) -> Result<String, PromptError> {
    Ok(Demonstration::positive(sample, schema, None)?.render())
}

pub fn render_negative_demo(neg: &NegativeSample, schema: &TypeSchema) -> Result<String, PromptError> {
    Ok(Demonstration::negative(neg, schema, None)?.render())
}

/// The test function up to and including the container initialization.
/// The model continues from the following line.
pub fn render_test_stub(sentence_text: &str, schema: &TypeSchema) -> Result<String, PromptError> {
    if sentence_text.trim().is_empty() {
        return Err(PromptError::EmptyTestText);
    }
    Ok(format!(
        "{}\n{}\n",
        header(schema.task, sentence_text),
        init_line(schema.task)
    ))
}

/// Placement of the most similar positive inside the positive block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    #[default]
    MostSimilarFirst,
    MostSimilarLast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prompt {
    pub instruction_block: String,
    pub demo_blocks: Vec<String>,
    pub test_block: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub estimated_tokens: usize,
}

impl Prompt {
    pub fn text(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.demo_blocks.len() + 2);
        parts.push(&self.instruction_block);
        parts.extend(self.demo_blocks.iter().map(String::as_str));
        parts.push(&self.test_block);
        parts.join("\n\n")
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Joins the blocks and trims demonstrations until the prompt fits.
///
/// `positives` must be sorted by descending similarity. Over budget, the
/// last positive is dropped first; negatives are trimmed from the end only
/// once no positive is left.
pub fn assemble_prompt(
    schema: &TypeSchema,
    positives: &[Demonstration],
    negatives: &[Demonstration],
    test_text: &str,
    budget_tokens: usize,
    order: DemoOrder,
) -> Result<Prompt, PromptError> {
    let instruction_block = format!(
        "{}\n{}",
        render_task_comment(schema.task),
        render_type_instruction(schema)
    );
    let test_block = render_test_stub(test_text, schema)?;
    const SEP: usize = 2;
    let base_chars = instruction_block.chars().count() + SEP + test_block.chars().count();
    let needed = base_chars.div_ceil(4);
    if needed > budget_tokens {
        return Err(PromptError::BudgetTooSmall {
            budget: budget_tokens,
            needed,
        });
    }
    let pos: Vec<String> = positives.iter().map(Demonstration::render).collect();
    let neg: Vec<String> = negatives.iter().map(Demonstration::render).collect();
    let pos_chars: Vec<usize> = pos.iter().map(|b| b.chars().count() + SEP).collect();
    let neg_chars: Vec<usize> = neg.iter().map(|b| b.chars().count() + SEP).collect();

    let mut n_pos = pos.len();
    let mut n_neg = neg.len();
    let total = |n_pos: usize, n_neg: usize| {
        base_chars + pos_chars[..n_pos].iter().sum::<usize>() + neg_chars[..n_neg].iter().sum::<usize>()
    };
    while total(n_pos, n_neg).div_ceil(4) > budget_tokens {
        if n_pos > 0 {
            n_pos -= 1;
        } else {
            n_neg -= 1;
        }
    }
    let mut kept_pos: Vec<String> = pos.into_iter().take(n_pos).collect();
    if order == DemoOrder::MostSimilarLast {
        kept_pos.reverse();
    }
    let mut demo_blocks = kept_pos;
    demo_blocks.extend(neg.into_iter().take(n_neg));
    let mut prompt = Prompt {
        instruction_block,
        demo_blocks,
        test_block,
        n_pos,
        n_neg,
        estimated_tokens: 0,
    };
    prompt.estimated_tokens = estimate_tokens(&prompt.text());
    debug_assert!(prompt.estimated_tokens <= budget_tokens);
    Ok(prompt)
}

/// Default demonstration count per prompt for the standard benchmarks.
pub fn default_shot_total(dataset: &str) -> Option<usize> {
    match dataset.to_ascii_lowercase().as_str() {
        "conll03" => Some(20),
        "ace04" => Some(14),
        "ace05-e" => Some(14),
        "conll04" => Some(20),
        "ace05-r" | "ace05" => Some(12),
        "nyt" => Some(24),
        "scierc" => Some(14),
        _ => None,
    }
}

pub const DEFAULT_NEGATIVES: usize = 2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMention;
    use crate::parsing::parse_output;

    fn ner_schema() -> TypeSchema {
        TypeSchema::ner(["person", "location"]).unwrap()
    }

    fn re_schema() -> TypeSchema {
        TypeSchema::re(["person", "organization"], ["Work For"]).unwrap()
    }

    #[test]
    fn type_instruction_ner() {
        assert_eq!(
            render_type_instruction(&ner_schema()),
            r#"# Given entity type set: ["person", "location"]"#
        );
        let single = TypeSchema::ner(["PER"]).unwrap();
        assert_eq!(render_type_instruction(&single), r#"# Given entity type set: ["PER"]"#);
    }

    #[test]
    fn type_instruction_re_has_two_lines() {
        let text = render_type_instruction(&re_schema());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("# Given entity type set:"));
        assert_eq!(lines[1], r#"# Given relation type set: ["Work For"]"#);
    }

    #[test]
    fn positive_demo_layout() {
        let s = AnnotatedSentence::new("a", "Steve works at Apple").with_entity("Steve", "person");
        let demo = render_positive_demo(&s, &ner_schema()).unwrap();
        assert!(demo.contains(r#"entity_dict["person"].append("Steve")"#));
        let lines: Vec<&str> = demo.lines().collect();
        assert_eq!(lines[0], r#"def named_entity_recognition(input_text="Steve works at Apple"):"#);
        assert_eq!(lines[1], "    entity_dict = defaultdict(list)");
        assert_eq!(lines[3], "    return entity_dict");
        assert_eq!(lines[4], RIGHT_FLAG);
    }

    #[test]
    fn positive_demo_keeps_corpus_order() {
        let s = AnnotatedSentence::new("a", "Steve met Ann in Rome")
            .with_entity("Steve", "person")
            .with_entity("Rome", "location")
            .with_entity("Ann", "person");
        let demo = render_positive_demo(&s, &ner_schema()).unwrap();
        let appends: Vec<&str> = demo.lines().filter(|l| l.contains(".append(")).collect();
        assert_eq!(appends.len(), 3);
        assert!(appends[0].contains("Steve"));
        assert!(appends[1].contains("Rome"));
        assert!(appends[2].contains("Ann"));
    }

    #[test]
    fn re_positive_demo_has_one_append() {
        let s = AnnotatedSentence::new("a", "Steve works at Apple").with_relation(
            ("Steve", "person"),
            "Work For",
            ("Apple", "organization"),
        );
        let demo = render_positive_demo(&s, &re_schema()).unwrap();
        let appends: Vec<&str> = demo.lines().filter(|l| l.contains(".append(")).collect();
        assert_eq!(
            appends,
            vec![r#"    entity_relation_dict["Work For"].append([("Steve", "person"), ("Apple", "organization")])"#]
        );
    }

    #[test]
    fn unannotated_sample_is_rejected() {
        let s = AnnotatedSentence::new("z", "Nothing here");
        assert_eq!(
            render_positive_demo(&s, &ner_schema()),
            Err(PromptError::NoAnnotations("z".into()))
        );
    }

    fn negative(wrong: PredictionSet, gold: PredictionSet) -> NegativeSample {
        let sentence = AnnotatedSentence::new("n", "Apple sells phones").with_entity("Apple", "organization");
        NegativeSample::new(sentence, wrong, gold, 0.0).unwrap()
    }

    #[test]
    fn negative_demo_wrong_then_correction() {
        let schema = TypeSchema::ner(["person", "organization"]).unwrap();
        let neg = negative(
            PredictionSet::from_entities([
                EntityMention::new("Apple", "person"),
                EntityMention::new("phones", "organization"),
            ]),
            PredictionSet::from_entities([EntityMention::new("Apple", "organization")]),
        );
        let demo = render_negative_demo(&neg, &schema).unwrap();
        let flag_at = demo.find(WRONG_FLAG).unwrap();
        let (wrong, correction) = demo.split_at(flag_at);
        assert!(wrong.contains(r#"entity_dict["person"].append("Apple")"#));
        assert!(correction.contains(r#"entity_dict["organization"].append("Apple")"#));
        assert!(!correction.contains("return"));
        // The parser takes the correction as the final answer.
        assert_eq!(parse_output(&demo, Task::Ner).0, neg.gold);
    }

    #[test]
    fn negative_demo_with_missing_triple() {
        let schema = TypeSchema::re(["person", "organization", "location"], ["Work For", "Live In"]).unwrap();
        let sentence = AnnotatedSentence::new("n", "Steve works at Apple in Cupertino")
            .with_relation(("Steve", "person"), "Work For", ("Apple", "organization"))
            .with_relation(("Steve", "person"), "Live In", ("Cupertino", "location"));
        let gold = PredictionSet::gold(&sentence, Task::Re);
        let wrong = PredictionSet::from_triples(gold.triples.iter().take(1).cloned());
        let neg = NegativeSample::new(sentence, wrong, gold, 0.5).unwrap();
        let demo = render_negative_demo(&neg, &schema).unwrap();
        let (wrong, correction) = demo.split_at(demo.find(WRONG_FLAG).unwrap());
        assert_eq!(wrong.matches(".append(").count(), 1);
        assert_eq!(correction.matches(".append(").count(), 2);
    }

    #[test]
    fn test_stub_ends_at_initialization() {
        let stub = render_test_stub("He said \"hi\" \\ bye", &ner_schema()).unwrap();
        assert!(stub.ends_with("    entity_dict = defaultdict(list)\n"));
        assert!(!stub.contains("return"));
        assert!(stub.contains(r#"input_text="He said \"hi\" \\ bye""#));
        let re = render_test_stub("x", &re_schema()).unwrap();
        assert!(re.ends_with("    entity_relation_dict = defaultdict(list)\n"));
        assert!(re.starts_with("def relation_extraction("));
        assert_eq!(render_test_stub("  ", &ner_schema()), Err(PromptError::EmptyTestText));
    }

    fn demo(id: &str, text: &str, sim: f64) -> Demonstration {
        let s = AnnotatedSentence::new(id, text).with_entity(text.split(' ').next().unwrap(), "person");
        Demonstration::positive(&s, &ner_schema(), Some(sim)).unwrap()
    }

    fn neg_demo(id: &str) -> Demonstration {
        let sentence = AnnotatedSentence::new(id, "Apple sells phones").with_entity("Apple", "person");
        let neg = NegativeSample::new(
            sentence.clone(),
            PredictionSet::from_entities([EntityMention::new("Apple", "location")]),
            PredictionSet::gold(&sentence, Task::Ner),
            0.0,
        )
        .unwrap();
        Demonstration::negative(&neg, &ner_schema(), None).unwrap()
    }

    #[test]
    fn assemble_orders_positives_before_negatives() {
        let pos = vec![demo("p1", "Ann runs", 0.9), demo("p2", "Bob walks", 0.5)];
        let neg = vec![neg_demo("n1"), neg_demo("n2")];
        let p = assemble_prompt(&ner_schema(), &pos, &neg, "Carl sits", 8192, DemoOrder::default()).unwrap();
        assert_eq!(p.demo_blocks.len(), 4);
        assert_eq!((p.n_pos, p.n_neg), (2, 2));
        assert!(p.demo_blocks[0].contains("Ann runs"));
        assert!(p.demo_blocks[1].contains("Bob walks"));
        assert!(p.demo_blocks[2].contains(WRONG_FLAG));
        let text = p.text();
        assert_eq!(p.estimated_tokens, text.chars().count().div_ceil(4));
        assert_eq!(text.matches("# Given entity type set").count(), 1);
        assert!(text.ends_with("entity_dict = defaultdict(list)\n"));
    }

    #[test]
    fn assemble_drops_lowest_similarity_positive_first() {
        let pos = vec![demo("p1", "Ann runs", 0.9), demo("p2", "Bob walks", 0.5)];
        let neg = vec![neg_demo("n1"), neg_demo("n2")];
        let full = assemble_prompt(&ner_schema(), &pos, &neg, "Carl sits", 8192, DemoOrder::default()).unwrap();
        let budget = full.estimated_tokens - 1;
        let p = assemble_prompt(&ner_schema(), &pos, &neg, "Carl sits", budget, DemoOrder::default()).unwrap();
        assert_eq!((p.n_pos, p.n_neg), (1, 2));
        assert!(p.demo_blocks[0].contains("Ann runs"));
        assert!(p.estimated_tokens <= budget);
    }

    #[test]
    fn assemble_trims_negatives_after_positives() {
        let pos = vec![demo("p1", "Ann runs", 0.9)];
        let neg = vec![neg_demo("n1"), neg_demo("n2")];
        let bare = assemble_prompt(&ner_schema(), &[], &[], "Carl sits", 8192, DemoOrder::default()).unwrap();
        let one_neg = assemble_prompt(&ner_schema(), &[], &neg[..1], "Carl sits", 8192, DemoOrder::default()).unwrap();
        let p = assemble_prompt(&ner_schema(), &pos, &neg, "Carl sits", one_neg.estimated_tokens, DemoOrder::default())
            .unwrap();
        assert_eq!((p.n_pos, p.n_neg), (0, 1));
        let p = assemble_prompt(&ner_schema(), &pos, &neg, "Carl sits", bare.estimated_tokens, DemoOrder::default())
            .unwrap();
        assert_eq!((p.n_pos, p.n_neg), (0, 0));
        assert_eq!(p.text(), bare.text());
    }

    #[test]
    fn assemble_rejects_tiny_budget() {
        let err = assemble_prompt(&ner_schema(), &[], &[], "Carl sits", 5, DemoOrder::default()).unwrap_err();
        assert!(matches!(err, PromptError::BudgetTooSmall { budget: 5, .. }));
    }

    #[test]
    fn zero_negatives_equals_positive_only() {
        let pos = vec![demo("p1", "Ann runs", 0.9), demo("p2", "Bob walks", 0.5)];
        let a = assemble_prompt(&ner_schema(), &pos, &[], "Carl sits", 8192, DemoOrder::default()).unwrap();
        let b = assemble_prompt(&ner_schema(), &pos, &Vec::new(), "Carl sits", 8192, DemoOrder::default()).unwrap();
        assert_eq!(a.text(), b.text());
        assert!(!a.text().contains("Wrong."));
    }

    #[test]
    fn most_similar_last_reverses_positive_block() {
        let pos = vec![demo("p1", "Ann runs", 0.9), demo("p2", "Bob walks", 0.5)];
        let p = assemble_prompt(&ner_schema(), &pos, &[], "Carl sits", 8192, DemoOrder::MostSimilarLast).unwrap();
        assert!(p.demo_blocks[1].contains("Ann runs"));
    }

    #[test]
    fn default_shot_counts() {
        assert_eq!(default_shot_total("CoNLL03"), Some(20));
        assert_eq!(default_shot_total("ace04"), Some(14));
        assert_eq!(default_shot_total("NYT"), Some(24));
        assert_eq!(default_shot_total("ace05-r"), Some(12));
        assert_eq!(default_shot_total("unknown"), None);
    }
}
