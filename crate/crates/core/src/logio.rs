//! Raw log and annotated-corpus I/O.
//!
//! Tokenization splits on whitespace and then peels bracket-like punctuation
//! off the ends of each fragment, so identifiers such as `attempt_14451444`,
//! `10.0.0.1` or `key=value` survive as single tokens.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters peeled off the front and back of a whitespace fragment.
pub const PEEL_CHARS: [char; 11] = ['[', ']', '(', ')', '{', '}', ',', ';', ':', '\'', '"'];

#[derive(Debug, Error)]
pub enum LogIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header underflow: line has {found} columns, {required} required")]
    HeaderUnderflow { required: usize, found: usize },
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{invariant} at line {line}")]
    Invariant { line: usize, invariant: String },
}

/// Per-token annotation category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "C")]
    Concept,
    #[serde(rename = "I")]
    Instance,
    #[serde(rename = "O")]
    None,
}

impl Category {
    /// Fixed class order used by the word scorer.
    pub const ALL: [Category; 3] = [Category::Concept, Category::Instance, Category::None];

    pub fn index(self) -> usize {
        match self {
            Category::Concept => 0,
            Category::Instance => 1,
            Category::None => 2,
        }
    }

    pub fn from_index(idx: usize) -> Option<Category> {
        Category::ALL.get(idx).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Category::Concept => "C",
            Category::Instance => "I",
            Category::None => "O",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogMessage {
    pub raw: String,
    pub tokens: Vec<String>,
    /// 1-based line number in the source file.
    pub source_line: usize,
}

impl LogMessage {
    pub fn new(raw: impl Into<String>, source_line: usize) -> Self {
        let raw = raw.into();
        let tokens = tokenize(&raw);
        LogMessage {
            raw,
            tokens,
            source_line: source_line.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedMessage {
    pub message: LogMessage,
    pub categories: Vec<Category>,
    /// `(concept_index, instance_index)` token positions.
    pub gold_pairs: Vec<(usize, usize)>,
}

impl AnnotatedMessage {
    /// Builds an annotated message, checking every structural invariant.
    pub fn new(
        tokens: Vec<String>,
        categories: Vec<Category>,
        gold_pairs: Vec<(usize, usize)>,
        source_line: usize,
    ) -> Result<Self, String> {
        if tokens.len() != categories.len() {
            return Err("length mismatch".to_string());
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(format!("token {bad:?} is empty or contains whitespace"));
        }
        let raw = tokens.join(" ");
        if tokenize(&raw) != tokens {
            return Err("tokens are not in canonical tokenized form".to_string());
        }
        for &(c, i) in &gold_pairs {
            if c >= tokens.len() || i >= tokens.len() {
                return Err(format!("pair ({c},{i}) out of range"));
            }
            if c == i {
                return Err(format!("pair ({c},{i}) is reflexive"));
            }
            if categories[c] != Category::Concept || categories[i] != Category::Instance {
                return Err(format!(
                    "pair ({c},{i}) does not join a concept to an instance"
                ));
            }
        }
        Ok(AnnotatedMessage {
            message: LogMessage {
                raw,
                tokens,
                source_line: source_line.max(1),
            },
            categories,
            gold_pairs,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.message.tokens
    }
}

/// Splits a log line into tokens.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for fragment in raw.split_whitespace() {
        let mut rest = fragment;
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| PEEL_CHARS.contains(c)) {
            out.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        while let Some(c) = rest.chars().next_back().filter(|c| PEEL_CHARS.contains(c)) {
            trailing.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Header-stripping rule: drop a fixed number of leading columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldPattern {
    pub drop_columns: usize,
}

impl FieldPattern {
    pub fn new(drop_columns: usize) -> Self {
        FieldPattern { drop_columns }
    }
}

/// Removes the configured header columns and returns the message content.
pub fn strip_fields(line: &str, pattern: &FieldPattern) -> Result<String, LogIoError> {
    if pattern.drop_columns == 0 {
        return Ok(line.to_string());
    }
    let mut rest = line.trim_start();
    for dropped in 0..pattern.drop_columns {
        if rest.is_empty() {
            return Err(LogIoError::HeaderUnderflow {
                required: pattern.drop_columns,
                found: dropped,
            });
        }
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        rest = rest[end..].trim_start();
    }
    Ok(rest.to_string())
}

/// Reads a raw log file, one message per line, stripping header columns.
/// Blank content lines are skipped but still advance the line counter.
pub fn read_raw_logs(path: &Path, pattern: &FieldPattern) -> Result<Vec<LogMessage>, LogIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let content = strip_fields(&line, pattern)?;
        let msg = LogMessage::new(content, idx + 1);
        if !msg.is_empty() {
            out.push(msg);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    tokens: Vec<String>,
    categories: Vec<Category>,
    pairs: Vec<[usize; 2]>,
}

/// Parses annotation records from any reader.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotatedMessage>, LogIoError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| LogIoError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
        let pairs = record.pairs.iter().map(|p| (p[0], p[1])).collect();
        let msg = AnnotatedMessage::new(record.tokens, record.categories, pairs, line_no).map_err(
            |invariant| LogIoError::Invariant {
                line: line_no,
                invariant,
            },
        )?;
        out.push(msg);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedMessage>, LogIoError> {
    parse_annotations(BufReader::new(File::open(path)?))
}

/// Serializes one annotated message as a single JSON line (no newline).
pub fn annotation_line(msg: &AnnotatedMessage) -> String {
    let record = AnnotationRecord {
        tokens: msg.message.tokens.clone(),
        categories: msg.categories.clone(),
        pairs: msg.gold_pairs.iter().map(|&(c, i)| [c, i]).collect(),
    };
    serde_json::to_string(&record).expect("annotation records always serialize")
}

pub fn write_annotations_to<W: Write>(
    mut w: W,
    messages: &[AnnotatedMessage],
) -> Result<(), LogIoError> {
    for msg in messages {
        writeln!(w, "{}", annotation_line(msg))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_annotations(path: &Path, messages: &[AnnotatedMessage]) -> Result<(), LogIoError> {
    write_annotations_to(BufWriter::new(File::create(path)?), messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_plain_message() {
        assert_eq!(
            tokenize("Listing instance in cell 949e1227"),
            toks(&["Listing", "instance", "in", "cell", "949e1227"])
        );
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t ").is_empty());
    }

    #[test]
    fn tokenize_peels_brackets_and_colons() {
        assert_eq!(
            tokenize("TaskAttempt: [attempt_14451444] using"),
            toks(&["TaskAttempt", ":", "[", "attempt_14451444", "]", "using"])
        );
        assert_eq!(
            tokenize("Cannot 'attach_volume' instance 853cfe1b"),
            toks(&["Cannot", "'", "attach_volume", "'", "instance", "853cfe1b"])
        );
    }

    #[test]
    fn tokenize_keeps_internal_punctuation() {
        assert_eq!(
            tokenize("state=ACTIVE host:port 10.0.0.1 /var/lib/x a-b"),
            toks(&["state=ACTIVE", "host:port", "10.0.0.1", "/var/lib/x", "a-b"])
        );
        assert_eq!(tokenize("::"), toks(&[":", ":"]));
        assert_eq!(tokenize("(x),"), toks(&["(", "x", ")", ","]));
    }

    #[test]
    fn strip_fields_cases() {
        let line = "nova INFO Listing instance";
        assert_eq!(strip_fields(line, &FieldPattern::new(0)).unwrap(), line);
        assert_eq!(
            strip_fields(line, &FieldPattern::new(2)).unwrap(),
            "Listing instance"
        );
        let err = strip_fields("a b c", &FieldPattern::new(4)).unwrap_err();
        assert!(err.to_string().contains("header underflow"), "{err}");
    }

    #[test]
    fn annotations_parse_and_validate() {
        let good = r#"{"tokens":["cell","949e1227"],"categories":["C","I"],"pairs":[[0,1]]}
{"tokens":["in"],"categories":["O"],"pairs":[]}
"#;
        let msgs = parse_annotations(good.as_bytes()).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].gold_pairs, vec![(0, 1)]);
        assert_eq!(msgs[0].message.source_line, 1);
        assert!(msgs[1].gold_pairs.is_empty());

        let bad = "\n{\"tokens\":[\"cell\",\"949e1227\"],\"categories\":[\"C\"],\"pairs\":[]}\n";
        let err = parse_annotations(bad.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "length mismatch at line 2");

        let broken = "{\"tokens\": [\"a\"";
        let err = parse_annotations(broken.as_bytes()).unwrap_err();
        assert!(matches!(err, LogIoError::Malformed { line: 1, .. }));

        let wrong_roles = r#"{"tokens":["cell","x"],"categories":["I","C"],"pairs":[[0,1]]}"#;
        assert!(matches!(
            parse_annotations(wrong_roles.as_bytes()).unwrap_err(),
            LogIoError::Invariant { line: 1, .. }
        ));
    }

    #[test]
    fn annotations_file_round_trip() {
        let msgs = vec![
            AnnotatedMessage::new(
                toks(&["Listing", "instance", "in", "cell", "949e1227"]),
                vec![
                    Category::None,
                    Category::None,
                    Category::None,
                    Category::Concept,
                    Category::Instance,
                ],
                vec![(3, 4)],
                1,
            )
            .unwrap(),
            AnnotatedMessage::new(
                toks(&["attempt_1", "TaskAttempt", "Transitioned"]),
                vec![Category::Instance, Category::Concept, Category::None],
                vec![(1, 0)],
                2,
            )
            .unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        write_annotations(&path, &msgs).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), msgs);
    }

    proptest! {
        #[test]
        fn tokenize_never_crosses_whitespace(s in "[a-z0-9_:()\\[\\] .=-]{0,40}") {
            let tokens = tokenize(&s);
            let fragments: Vec<&str> = s.split_whitespace().collect();
            // every token lies inside exactly one fragment, in order
            let mut frag_iter = fragments.iter();
            let mut current = frag_iter.next().map(|f| f.to_string());
            for t in &tokens {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
                loop {
                    match current.as_mut() {
                        Some(frag) if frag.starts_with(t.as_str()) => {
                            frag.drain(..t.len());
                            break;
                        }
                        Some(frag) if frag.is_empty() => {
                            current = frag_iter.next().map(|f| f.to_string());
                        }
                        other => prop_assert!(false, "token {:?} not at head of {:?}", t, other),
                    }
                }
            }
        }

        #[test]
        fn tokenize_idempotent_without_peel_chars(s in "[a-zA-Z0-9_./=-]{1,12}( [a-zA-Z0-9_./=-]{1,12}){0,6}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn tokenize_is_canonical_on_its_output(s in "[a-z(\\[:,]{0,3}[a-z0-9]{1,6}[)\\]:,;]{0,3}( [a-z:]{1,5}){0,4}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}
