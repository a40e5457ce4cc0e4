//! Recovery of structured predictions from code-style generations.
//!
//! The scanner is line oriented and hand-rolled: each candidate line is
//! tokenized into identifiers, quoted strings and punctuation, then matched
//! against the append-statement grammar. Nothing here ever fails; lines that
//! do not match are recorded in [`ParseDiagnostics`].

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, EntityMention, RelationTriple, Task};

pub const NER_CONTAINER: &str = "entity_dict";
pub const RE_CONTAINER: &str = "entity_relation_dict";

/// Flag line that introduces a correction block.
pub const WRONG_FLAG_PREFIX: &str = "# Above Result: Wrong.";

/// A set of predicted (or gold) elements for one sentence.
///
/// Insertion order is kept for rendering; equality is set equality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task: Task,
    #[serde(default, skip_serializing_if = "IndexSet::is_empty")]
    pub entities: IndexSet<EntityMention>,
    #[serde(default, skip_serializing_if = "IndexSet::is_empty")]
    pub triples: IndexSet<RelationTriple>,
}

impl PredictionSet {
    pub fn empty(task: Task) -> Self {
        PredictionSet {
            task,
            entities: IndexSet::new(),
            triples: IndexSet::new(),
        }
    }

    /// The gold element set of a sentence for `task`.
    pub fn gold(sentence: &AnnotatedSentence, task: Task) -> Self {
        let mut set = Self::empty(task);
        match task {
            Task::Ner => set.entities.extend(sentence.entities.iter().cloned()),
            Task::Re => set.triples.extend(sentence.relations.iter().cloned()),
        }
        set
    }

    pub fn from_entities(entities: impl IntoIterator<Item = EntityMention>) -> Self {
        let mut set = Self::empty(Task::Ner);
        set.entities.extend(entities);
        set
    }

    pub fn from_triples(triples: impl IntoIterator<Item = RelationTriple>) -> Self {
        let mut set = Self::empty(Task::Re);
        set.triples.extend(triples);
        set
    }

    /// Number of elements of the active kind.
    pub fn len(&self) -> usize {
        match self.task {
            Task::Ner => self.entities.len(),
            Task::Re => self.triples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.entities.clear();
        self.triples.clear();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub lines_seen: usize,
    pub lines_parsed: usize,
    /// (1-based line number, reason)
    pub skipped: Vec<(usize, String)>,
    /// Set when scanning stopped at a second function definition.
    pub truncated_at: Option<usize>,
}

impl ParseDiagnostics {
    /// Lines that were neither parsed nor skipped (blank, comments, structure).
    pub fn non_candidate(&self) -> usize {
        self.lines_seen - self.lines_parsed - self.skipped.len()
    }
}

pub fn parse_ner_output(text: &str) -> (PredictionSet, ParseDiagnostics) {
    parse_output(text, Task::Ner)
}

pub fn parse_re_output(text: &str) -> (PredictionSet, ParseDiagnostics) {
    parse_output(text, Task::Re)
}

/// Parses the first function body of `text` for the given task.
///
/// A `# Above Result: Wrong.` flag discards what was collected so far; the
/// lines that follow it are the correction.
pub fn parse_output(text: &str, task: Task) -> (PredictionSet, ParseDiagnostics) {
    let mut set = PredictionSet::empty(task);
    let mut diag = ParseDiagnostics::default();
    let mut body_started = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.starts_with("def ") {
            if body_started {
                diag.truncated_at = Some(line_no);
                break;
            }
            body_started = true;
            diag.lines_seen += 1;
            continue;
        }
        diag.lines_seen += 1;
        if line.starts_with(WRONG_FLAG_PREFIX) {
            set.clear();
            diag.lines_parsed = 0;
            body_started = true;
            continue;
        }
        if line.is_empty() || line.starts_with('#') || is_structural(line) {
            continue;
        }
        body_started = true;
        match parse_statement(line, task) {
            Ok(Element::Entity(m)) => {
                set.entities.insert(m);
                diag.lines_parsed += 1;
            }
            Ok(Element::Triple(t)) => {
                set.triples.insert(t);
                diag.lines_parsed += 1;
            }
            Err(reason) => diag.skipped.push((line_no, reason)),
        }
    }
    (set, diag)
}

fn is_structural(line: &str) -> bool {
    line.starts_with("return")
        || line.starts_with("input_text")
        || line.starts_with("\"\"\"")
        || [NER_CONTAINER, RE_CONTAINER].iter().any(|c| {
            line.strip_prefix(c)
                .map(|rest| rest.trim_start().starts_with('='))
                .unwrap_or(false)
        })
}

/// Returns `generation` without a leading copy of `prompt`.
pub fn strip_echo<'a>(generation: &'a str, prompt: &str) -> &'a str {
    generation.strip_prefix(prompt).unwrap_or(generation)
}

/// The input text embedded in the last function header of a prompt.
pub fn extract_test_input(prompt: &str) -> Option<String> {
    let header = prompt.lines().rev().find(|l| l.trim_start().starts_with("def "))?;
    let tokens = tokenize(header.trim()).ok()?;
    tokens
        .windows(2)
        .find_map(|w| match (&w[0], &w[1]) {
            (Token::Punct('='), Token::Str(s)) => Some(s.clone()),
            _ => None,
        })
}

enum Element {
    Entity(EntityMention),
    Triple(RelationTriple),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Punct(char),
}

fn tokenize(line: &str) -> Result<Vec<Token>, String> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '#' => break,
            '"' | '\'' => {
                chars.next();
                let mut value = String::new();
                let mut closed = false;
                while let Some(ch) = chars.next() {
                    if ch == c {
                        closed = true;
                        break;
                    }
                    if ch == '\\' {
                        match chars.next() {
                            Some('n') => value.push('\n'),
                            Some('r') => value.push('\r'),
                            Some('t') => value.push('\t'),
                            Some(e @ ('\\' | '"' | '\'')) => value.push(e),
                            Some(other) => {
                                value.push('\\');
                                value.push(other);
                            }
                            None => return Err("syntax: unterminated escape".into()),
                        }
                    } else {
                        value.push(ch);
                    }
                }
                if !closed {
                    return Err("syntax: unterminated string".into());
                }
                tokens.push(Token::Str(value));
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut ident = String::new();
                while let Some(&ch) = chars.peek() {
                    if ch.is_alphanumeric() || ch == '_' {
                        ident.push(ch);
                        chars.next();
                    } else {
                        break;
                    }
                }
                tokens.push(Token::Ident(ident));
            }
            '[' | ']' | '(' | ')' | ',' | '.' | ';' | ':' | '=' => {
                tokens.push(Token::Punct(c));
                chars.next();
            }
            other => return Err(format!("syntax: unexpected character `{other}`")),
        }
    }
    // Trailing semicolon is harmless.
    if tokens.last() == Some(&Token::Punct(';')) {
        tokens.pop();
    }
    Ok(tokens)
}

struct Cursor {
    tokens: Vec<Token>,
    pos: usize,
}

impl Cursor {
    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn punct(&mut self, expected: &[char]) -> Result<char, String> {
        match self.next() {
            Some(Token::Punct(c)) if expected.contains(c) => Ok(*c),
            Some(t) => Err(format!("syntax: expected one of {expected:?}, found {t:?}")),
            None => Err(format!("syntax: expected one of {expected:?}, found end of line")),
        }
    }

    fn string(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Token::Str(s)) => Ok(s.clone()),
            Some(t) => Err(format!("syntax: expected quoted string, found {t:?}")),
            None => Err("syntax: expected quoted string, found end of line".into()),
        }
    }

    fn ident(&mut self, expected: &str) -> Result<(), String> {
        match self.next() {
            Some(Token::Ident(i)) if i == expected => Ok(()),
            Some(t) => Err(format!("syntax: expected `{expected}`, found {t:?}")),
            None => Err(format!("syntax: expected `{expected}`, found end of line")),
        }
    }

    fn finish(&self) -> Result<(), String> {
        if self.pos < self.tokens.len() {
            Err("syntax: trailing tokens".into())
        } else {
            Ok(())
        }
    }
}

fn closing(open: char) -> char {
    if open == '(' {
        ')'
    } else {
        ']'
    }
}

fn parse_statement(line: &str, task: Task) -> Result<Element, String> {
    let tokens = tokenize(line)?;
    let container = match tokens.first() {
        Some(Token::Ident(name)) if name == NER_CONTAINER || name == RE_CONTAINER => name.clone(),
        _ => return Err("unrecognized statement".into()),
    };
    let expected = match task {
        Task::Ner => NER_CONTAINER,
        Task::Re => RE_CONTAINER,
    };
    if container != expected {
        return Err(format!("task: `{container}` statement in a {} output", task.as_str()));
    }
    let mut cur = Cursor { tokens, pos: 1 };
    cur.punct(&['['])?;
    let key = cur.string()?;
    cur.punct(&[']'])?;
    cur.punct(&['.'])?;
    cur.ident("append")?;
    let open = cur.punct(&['(', '['])?;
    let element = match task {
        Task::Ner => {
            let span = cur.string()?;
            if span.trim().is_empty() {
                return Err("empty span".into());
            }
            Element::Entity(raw_mention(span, key))
        }
        Task::Re => {
            let list_open = cur.punct(&['[', '('])?;
            let mut args = Vec::new();
            loop {
                if matches!(cur.peek(), Some(Token::Punct(c)) if *c == closing(list_open)) {
                    cur.next();
                    break;
                }
                if !args.is_empty() {
                    cur.punct(&[','])?;
                    // Tolerate a trailing comma before the closing bracket.
                    if matches!(cur.peek(), Some(Token::Punct(c)) if *c == closing(list_open)) {
                        cur.next();
                        break;
                    }
                }
                let tuple_open = cur.punct(&['(', '['])?;
                let span = cur.string()?;
                cur.punct(&[','])?;
                let ty = cur.string()?;
                cur.punct(&[closing(tuple_open)])?;
                args.push((span, ty));
            }
            if args.len() != 2 {
                return Err("arity".into());
            }
            if args.iter().any(|(span, _)| span.trim().is_empty()) {
                return Err("empty span".into());
            }
            let mut args = args.into_iter();
            let (hs, ht) = args.next().unwrap();
            let (ts, tt) = args.next().unwrap();
            Element::Triple(RelationTriple {
                head: raw_mention(hs, ht),
                relation: key,
                tail: raw_mention(ts, tt),
            })
        }
    };
    cur.punct(&[closing(open)])?;
    cur.finish()?;
    Ok(element)
}

/// Builds a mention without trimming; parsed strings are returned verbatim.
fn raw_mention(span: String, entity_type: String) -> EntityMention {
    EntityMention { span, entity_type }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_canonical_ner_line() {
        let (set, diag) = parse_ner_output(r#"entity_dict["person"].append("Steve")"#);
        assert_eq!(set, PredictionSet::from_entities([EntityMention::new("Steve", "person")]));
        assert_eq!(diag.lines_parsed, 1);
    }

    #[test]
    fn parses_bracket_variant_and_single_quotes() {
        let (set, _) = parse_ner_output(r#"entity_dict["person"].append["Steve"]"#);
        assert_eq!(set, PredictionSet::from_entities([EntityMention::new("Steve", "person")]));
        let (set, _) = parse_ner_output("  entity_dict['person'].append('Steve')  ");
        assert_eq!(set.entities.len(), 1);
    }

    #[test]
    fn non_matching_line_is_skipped_with_reason() {
        let (set, diag) = parse_ner_output(r#"print("hello")"#);
        assert!(set.is_empty());
        assert_eq!(diag.skipped.len(), 1);
        assert_eq!(diag.skipped[0].0, 1);
        assert!(!diag.skipped[0].1.is_empty());
    }

    #[test]
    fn parses_re_line() {
        let line = r#"entity_relation_dict["Work For"].append([("Steve", "person"), ("Apple", "organization")])"#;
        let (set, diag) = parse_re_output(line);
        assert_eq!(diag.lines_parsed, 1);
        let t = set.triples.first().unwrap();
        assert_eq!(t.head, EntityMention::new("Steve", "person"));
        assert_eq!(t.relation, "Work For");
        assert_eq!(t.tail, EntityMention::new("Apple", "organization"));
    }

    #[test]
    fn re_arity_violation() {
        let line = r#"entity_relation_dict["Work For"].append([("Steve", "person")])"#;
        let (set, diag) = parse_re_output(line);
        assert!(set.is_empty());
        assert_eq!(diag.skipped, vec![(1, "arity".to_string())]);
    }

    #[test]
    fn re_duplicates_collapse() {
        let line = r#"entity_relation_dict["Work For"].append([("Steve", "person"), ("Apple", "organization")])"#;
        let text = format!("{line}\n{line}\n");
        let (set, diag) = parse_re_output(&text);
        assert_eq!(set.triples.len(), 1);
        assert_eq!(diag.lines_parsed, 2);
    }

    #[test]
    fn re_tolerates_spacing_and_quote_style() {
        let line = "entity_relation_dict[ 'Live In' ].append( [ ( 'Bob' ,'person' ),('Paris', \"location\") ] )";
        let (set, _) = parse_re_output(line);
        assert_eq!(set.triples.len(), 1);
    }

    #[test]
    fn stops_at_second_function() {
        let text = "def named_entity_recognition(input_text=\"a\"):\n    entity_dict = defaultdict(list)\n    entity_dict[\"PER\"].append(\"a\")\n    return entity_dict\n\ndef named_entity_recognition(input_text=\"b\"):\n    entity_dict[\"PER\"].append(\"b\")\n";
        let (set, diag) = parse_ner_output(text);
        assert_eq!(set.entities.len(), 1);
        assert_eq!(diag.truncated_at, Some(6));
        assert_eq!(diag.lines_seen, 5);
    }

    #[test]
    fn continuation_without_header_stops_at_first_def() {
        let text = "    entity_dict[\"PER\"].append(\"a\")\n    return entity_dict\ndef named_entity_recognition(input_text=\"b\"):\n    entity_dict[\"PER\"].append(\"b\")\n";
        let (set, _) = parse_ner_output(text);
        assert_eq!(set, PredictionSet::from_entities([EntityMention::new("a", "PER")]));
    }

    #[test]
    fn wrong_flag_replaces_collected_lines() {
        let text = "entity_dict[\"person\"].append(\"Apple\")\n# Above Result: Wrong. Right Result is below:\nentity_dict[\"organization\"].append(\"Apple\")\n";
        let (set, _) = parse_ner_output(text);
        assert_eq!(set, PredictionSet::from_entities([EntityMention::new("Apple", "organization")]));
    }

    #[test]
    fn escaped_quotes_are_unescaped() {
        let (set, _) = parse_ner_output(r#"entity_dict["work"].append("The \"Best\" \\ Show")"#);
        assert_eq!(set.entities[0].span, "The \"Best\" \\ Show");
    }

    #[test]
    fn wrong_task_container_is_skipped() {
        let (set, diag) = parse_ner_output(r#"entity_relation_dict["x"].append([("a","b"),("c","d")])"#);
        assert!(set.is_empty());
        assert!(diag.skipped[0].1.starts_with("task"));
    }

    #[test]
    fn structural_lines_are_not_skipped() {
        let text = "entity_dict = defaultdict(list)\n\n# comment\nreturn entity_dict\n";
        let (_, diag) = parse_ner_output(text);
        assert_eq!(diag.lines_seen, 4);
        assert!(diag.skipped.is_empty());
        assert_eq!(diag.non_candidate(), 4);
    }

    #[test]
    fn truncated_generation_is_skipped() {
        let (set, diag) = parse_ner_output("entity_dict[\"PER\"].append(\"Jo");
        assert!(set.is_empty());
        assert!(diag.skipped[0].1.contains("unterminated"));
    }

    #[test]
    fn strip_echo_cases() {
        assert_eq!(strip_echo("PROMPT tail", "PROMPT "), "tail");
        assert_eq!(strip_echo("other", "PROMPT"), "other");
        assert_eq!(strip_echo("PROMPT", "PROMPT"), "");
    }

    #[test]
    fn prediction_json_shape() {
        let set = PredictionSet::from_entities([EntityMention::new("EU", "ORG")]);
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"{"task":"ner","entities":[{"span":"EU","type":"ORG"}]}"#);
        let back: PredictionSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn set_equality_ignores_order() {
        let a = PredictionSet::from_entities([EntityMention::new("a", "X"), EntityMention::new("b", "Y")]);
        let b = PredictionSet::from_entities([EntityMention::new("b", "Y"), EntityMention::new("a", "X")]);
        assert_eq!(a, b);
    }
}
