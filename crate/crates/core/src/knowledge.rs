//! Domain knowledge: an instance → concept store accumulated from superior
//! concept–instance pairs.
//!
//! Conflicting concepts for one instance are all kept with occurrence counts;
//! lookup returns the most frequent one, ties going to the concept seen
//! first. Instance keys are case-sensitive.
//!
//! On disk the store is a tab-separated file:
//!
//! ```text
//! #semlog-kb\tv1\t<insert_counter>
//! <instance>\t<concept>\t<count>\t<first_seen>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &str = "#semlog-kb";
const VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge entries need a non-empty concept and instance")]
    EmptyText,
    #[error("knowledge text may not contain tabs or line breaks: {0:?}")]
    InvalidText(String),
    #[error("knowledge file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptRecord {
    pub concept: String,
    pub count: u64,
    pub first_seen: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    entries: BTreeMap<String, Vec<ConceptRecord>>,
    insert_counter: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct instances.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn insert_counter(&self) -> u64 {
        self.insert_counter
    }

    pub fn records(&self, instance: &str) -> &[ConceptRecord] {
        self.entries.get(instance).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ConceptRecord])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Records one observation of `instance` as an instance of `concept`.
    pub fn add(&mut self, concept: &str, instance: &str) -> Result<(), KbError> {
        if concept.is_empty() || instance.is_empty() {
            return Err(KbError::EmptyText);
        }
        if let Some(bad) = [concept, instance]
            .into_iter()
            .find(|t| t.contains(['\t', '\n', '\r']))
        {
            return Err(KbError::InvalidText(bad.to_string()));
        }
        self.insert_counter += 1;
        let records = self.entries.entry(instance.to_string()).or_default();
        match records.iter_mut().find(|r| r.concept == concept) {
            Some(r) => r.count += 1,
            None => records.push(ConceptRecord {
                concept: concept.to_string(),
                count: 1,
                first_seen: self.insert_counter,
            }),
        }
        Ok(())
    }

    /// Most frequent concept recorded for `instance`; ties go to the earliest.
    pub fn lookup(&self, instance: &str) -> Option<&str> {
        self.entries
            .get(instance)?
            .iter()
            .min_by(|a, b| b.count.cmp(&a.count).then(a.first_seen.cmp(&b.first_seen)))
            .map(|r| r.concept.as_str())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), KbError> {
        writeln!(w, "{MAGIC}\t{VERSION}\t{}", self.insert_counter)?;
        for (instance, records) in &self.entries {
            for r in records {
                writeln!(
                    w,
                    "{instance}\t{}\t{}\t{}",
                    r.concept, r.count, r.first_seen
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::new();
        let mut header_seen = false;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let bad = |reason: String| KbError::Malformed {
                line: lineno,
                reason,
            };
            if !header_seen {
                let fields: Vec<&str> = line.split('\t').collect();
                match fields.as_slice() {
                    [MAGIC, VERSION, counter] => {
                        kb.insert_counter = counter
                            .parse()
                            .map_err(|_| bad(format!("bad insert counter {counter:?}")))?;
                    }
                    _ => return Err(bad("expected header".into())),
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [instance, concept, count, first_seen] = fields.as_slice() else {
                return Err(bad(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            };
            if instance.is_empty() || concept.is_empty() {
                return Err(bad("empty instance or concept".into()));
            }
            let count: u64 = count
                .parse()
                .map_err(|_| bad(format!("bad count {count:?}")))?;
            let first_seen: u64 = first_seen
                .parse()
                .map_err(|_| bad(format!("bad sequence number {first_seen:?}")))?;
            if count == 0 {
                return Err(bad("count must be at least 1".into()));
            }
            if first_seen == 0 || first_seen > kb.insert_counter {
                return Err(bad(format!(
                    "sequence number {first_seen} outside 1..={}",
                    kb.insert_counter
                )));
            }
            let records = kb.entries.entry(instance.to_string()).or_default();
            if records.iter().any(|r| r.concept == *concept) {
                return Err(bad(format!("duplicate record for ({instance}, {concept})")));
            }
            records.push(ConceptRecord {
                concept: concept.to_string(),
                count,
                first_seen,
            });
        }
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
